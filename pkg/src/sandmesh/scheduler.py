"""Resource-aware job distribution over the mesh.

Each scheduling pass broadcasts a stats request, queues every node with
room for another VM pair, and hands the next pending job to each queued node
in id order. When nothing is eligible the scheduler sleeps for
``retry_timeout_s`` and tries again. Jobs then walk the sandbox lifecycle
on the event loop: boot and address wait, APK transfer, install and
stimulation, forensics, result transfer.
"""

from __future__ import annotations

import json
import logging
import random
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Any, Callable, Iterable

from sandmesh.fixtures import FixtureSet
from sandmesh.forensics import EMPTY_DIFF, FsDiff, diff, extract_artifacts, emit_report, snapshot
from sandmesh.mesh import HEAD, Mesh, NodeId, NodeStats, TransferError
from sandmesh.sandbox import (
    NetLogEntry,
    SandboxPair,
    VmLifecycle,
    boot,
    install_and_launch,
    spawn_pair,
    stimulate,
    stop_and_snapshot,
)
from sandmesh.uiexplore import ExploreConfig, InteractionRecord

log = logging.getLogger(__name__)


class JobState(str, Enum):
    PENDING = "PENDING"
    DISPATCHED = "DISPATCHED"
    RUNNING = "RUNNING"
    COLLECTING = "COLLECTING"
    DONE = "DONE"
    FAILED_ABANDONED = "FAILED_ABANDONED"
    FAILED_RETRYING = "FAILED_RETRYING"


_S = JobState
JOB_TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    # PENDING -> FAILED_RETRYING: the chosen node vanished before dispatch.
    # PENDING -> FAILED_ABANDONED: the global deadline passed with no node.
    _S.PENDING: frozenset({_S.DISPATCHED, _S.FAILED_RETRYING, _S.FAILED_ABANDONED}),
    _S.DISPATCHED: frozenset({_S.RUNNING, _S.FAILED_RETRYING, _S.FAILED_ABANDONED}),
    _S.RUNNING: frozenset({_S.COLLECTING, _S.FAILED_RETRYING, _S.FAILED_ABANDONED}),
    _S.COLLECTING: frozenset({_S.DONE, _S.FAILED_RETRYING, _S.FAILED_ABANDONED}),
    _S.FAILED_RETRYING: frozenset({_S.PENDING}),
    _S.DONE: frozenset(),
    _S.FAILED_ABANDONED: frozenset(),
}
TERMINAL = frozenset({JobState.DONE, JobState.FAILED_ABANDONED})


class FailureKind(str, Enum):
    IP_TIMEOUT = "IP_TIMEOUT"
    NODE_LOST = "NODE_LOST"
    TRANSFER = "TRANSFER"
    DISPATCH_LOST = "DISPATCH_LOST"


class SchedulerError(Exception):
    pass


@dataclass(frozen=True)
class Job:
    job_id: str
    app_ref: str = "benign"
    stimulate_s: float = 300.0
    ram_req_mb: float = 2048.0
    retry_limit: int = 0

    def __post_init__(self) -> None:
        if self.stimulate_s <= 0:
            raise ValueError("stimulate_s must be positive")
        if self.ram_req_mb <= 0:
            raise ValueError("ram_req_mb must be positive")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be non-negative")


@dataclass(frozen=True)
class ScheduleConfig:
    max_vms_per_node: int = 3
    load_threshold: float = 4.0
    retry_timeout_s: float = 5.0
    fixed_wait_s: float = 220.0
    boot_wait_s: float = 60.0
    ip_wait_s: float = 60.0
    forensics_wait_s: float = 100.0
    wait_jitter_s: float = 0.0
    broadcast_timeout_s: float = 1.0
    deadline_s: float = 7 * 86400.0
    ui_budget: int = 100
    ui_interval_s: float = 2.0

    def __post_init__(self) -> None:
        if self.max_vms_per_node < 1:
            raise ValueError("max_vms_per_node must be >= 1")
        times = (self.retry_timeout_s, self.fixed_wait_s, self.boot_wait_s, self.ip_wait_s,
                 self.forensics_wait_s, self.wait_jitter_s, self.broadcast_timeout_s, self.deadline_s)
        if min(times) < 0:
            raise ValueError("schedule times must be non-negative")
        parts = self.boot_wait_s + self.ip_wait_s + self.forensics_wait_s
        if abs(parts - self.fixed_wait_s) > 1e-9:
            raise ValueError(f"boot + ip + forensics waits ({parts}) must add up to fixed_wait_s ({self.fixed_wait_s})")
        if self.wait_jitter_s > self.forensics_wait_s:
            raise ValueError("wait_jitter_s cannot exceed forensics_wait_s")

    @classmethod
    def with_fixed_wait(cls, fixed_wait_s: float, **kw: Any) -> "ScheduleConfig":
        """Scale the 60/60/100 wait split to a different aggregate."""
        boot = fixed_wait_s * 60.0 / 220.0
        return cls(fixed_wait_s=fixed_wait_s, boot_wait_s=boot, ip_wait_s=boot,
                   forensics_wait_s=fixed_wait_s - 2 * boot, **kw)


@dataclass
class JobResult:
    job_id: str
    state: JobState
    node: NodeId | None = None
    attempts: int = 0
    failure: str | None = None
    fs_diff: FsDiff = EMPTY_DIFF
    net_log: tuple[NetLogEntry, ...] = ()
    interaction_record: InteractionRecord = field(default_factory=InteractionRecord)
    root_flag: bool = False
    crash: bool = False
    timings: dict[str, float] = field(default_factory=dict)
    artifacts: dict[str, bytes] = field(default_factory=dict)

    def report(self) -> dict[str, Any]:
        """Forensic report plus the job's terminal state and failure cause."""
        doc = emit_report(self.fs_diff, self.net_log, self.root_flag, self.interaction_record,
                          job_id=self.job_id, contents=self.artifacts)
        doc["state"] = self.state.value
        doc["failure"] = self.failure
        return doc


def build_ready_queue(stats: Iterable[NodeStats], job: Job, cfg: ScheduleConfig) -> list[NodeId]:
    """Nodes with RAM for `job`, load under threshold and a free slot, by id."""
    return sorted(
        s.node for s in stats
        if s.ram_free_mb >= job.ram_req_mb
        and s.load_avg < cfg.load_threshold
        and s.active_vms < cfg.max_vms_per_node
    )


@dataclass
class _Track:
    job: Job
    seq: int
    state: JobState = JobState.PENDING
    node: NodeId | None = None
    node_epoch: int = 0
    attempts: int = 0
    failures: int = 0
    pair: SandboxPair | None = None
    jitter: float = 0.0
    times: dict[str, float] = field(default_factory=dict)
    result: JobResult | None = None


class Scheduler:
    """Drives jobs to terminal states on the mesh's event loop.

    Every state change is appended to :attr:`transitions` (and passed to
    each callable in :attr:`observers`), which is the NDJSON transition log.
    """

    def __init__(
        self,
        mesh: Mesh,
        cfg: ScheduleConfig | None = None,
        fixtures: FixtureSet | None = None,
        *,
        ip_fail_prob: float = 0.0,
        seed: int | str = 0,
        explore_cfg: ExploreConfig | None = None,
    ) -> None:
        if not 0.0 <= ip_fail_prob <= 1.0:
            raise ValueError("ip_fail_prob must be a probability")
        self.mesh = mesh
        self.clock = mesh.clock
        self.cfg = cfg or ScheduleConfig()
        self.fixtures = fixtures or FixtureSet.builtin()
        self.ip_fail_prob = ip_fail_prob
        self.seed = seed
        self.explore_cfg = explore_cfg or ExploreConfig()
        self.baseline_snapshot = snapshot(self.fixtures.baseline)
        self.transitions: list[dict[str, Any]] = []
        self.observers: list[Callable[["Scheduler", dict[str, Any]], None]] = []
        self.last_broadcast: frozenset[NodeId] = frozenset()
        self.slots: dict[NodeId, int] = {}
        self.dispatch_count = 0
        self.passes = 0
        self._tracks: dict[str, _Track] = {}
        self._pending: deque[_Track] = deque()
        self._results: dict[str, JobResult] = {}
        self._pass_scheduled = False
        self._node_epoch: dict[NodeId, int] = {}
        mesh.listeners.append(self._on_membership)

    # -- bookkeeping --------------------------------------------------------

    def _on_membership(self, event: str, node: NodeId) -> None:
        if event == "leave":
            self._node_epoch[node] = self._node_epoch.get(node, 0) + 1

    def _set(self, track: _Track, new: JobState, node: NodeId | None = None) -> None:
        old = track.state
        if new not in JOB_TRANSITIONS[old]:
            raise SchedulerError(f"{track.job.job_id}: illegal transition {old.value} -> {new.value}")
        track.state = new
        entry = {
            "job_id": track.job.job_id,
            "old": old.value,
            "new": new.value,
            "timestamp_s": round(self.clock.now, 6),
            "node": node if node is not None else track.node,
        }
        self.transitions.append(entry)
        for obs in self.observers:
            obs(self, entry)

    def state_of(self, job_id: str) -> JobState:
        return self._tracks[job_id].state

    def state_counts(self) -> dict[JobState, int]:
        counts = {s: 0 for s in JobState}
        for t in self._tracks.values():
            counts[t.state] += 1
        return counts

    def _track(self, job: Job | str) -> _Track:
        job_id = job if isinstance(job, str) else job.job_id
        try:
            return self._tracks[job_id]
        except KeyError:
            raise SchedulerError(f"unknown job {job_id!r}") from None

    def _alive(self, track: _Track) -> bool:
        node = track.node
        return (node is not None and self.mesh.is_live(node)
                and self._node_epoch.get(node, 0) == track.node_epoch)

    def _release(self, track: _Track) -> None:
        node = track.node
        if node is None or self.slots.get(node, 0) <= 0:
            return
        self.slots[node] -= 1
        if self._alive(track):
            self.mesh.release_slot(node)

    def _publish(self, track: _Track, result: JobResult) -> None:
        result.state = track.state
        result.attempts = track.attempts
        result.timings = _phase_timings(track.times)
        track.result = result
        self._results[track.job.job_id] = result

    # -- submission and passes ---------------------------------------------------

    def submit(self, jobs: Iterable[Job]) -> None:
        for job in jobs:
            if job.job_id in self._tracks:
                raise SchedulerError(f"duplicate job id {job.job_id!r}")
            self.fixtures.app(job.app_ref)
            track = _Track(job, len(self._tracks))
            track.times["submitted"] = self.clock.now
            self._tracks[job.job_id] = track
            self._pending.append(track)
        self._ensure_pass()

    def _ensure_pass(self, delay: float = 0.0) -> None:
        if self._pending and not self._pass_scheduled:
            self._pass_scheduled = True
            self.clock.call_later(delay, self._pass)

    def _pass(self) -> None:
        self._pass_scheduled = False
        if not self._pending:
            return
        self.passes += 1
        if self.clock.now >= self.cfg.deadline_s:
            while self._pending:
                track = self._pending.popleft()
                self._set(track, JobState.FAILED_ABANDONED, None)
                self._publish(track, JobResult(track.job.job_id, track.state, failure="DEADLINE"))
            return
        stats = self.broadcast()
        by_id = {s.node: s for s in stats}
        queue = build_ready_queue(stats, self._pending[0].job, self.cfg)
        dispatched = 0
        for node in queue:
            if not self._pending:
                break
            track = self._take_fitting(by_id[node])
            if track is not None and self._dispatch(track, node):
                dispatched += 1
        if self._pending:
            self._ensure_pass(0.0 if dispatched else self.cfg.retry_timeout_s)

    def _take_fitting(self, stats: NodeStats) -> _Track | None:
        for i, track in enumerate(self._pending):
            if track.job.ram_req_mb <= stats.ram_free_mb:
                del self._pending[i]
                return track
        return None

    # -- public operations ---------------------------------------------------

    def broadcast(self) -> list[NodeStats]:
        """Refresh :attr:`last_broadcast` from a fresh stats broadcast."""
        stats = self.mesh.broadcast_stats(self.cfg.broadcast_timeout_s)
        self.last_broadcast = frozenset(s.node for s in stats)
        return stats

    def dispatch(self, job: Job, node: NodeId) -> bool:
        """Send a PENDING job to `node`; False if the node vanished (job re-queued)."""
        track = self._track(job)
        if track.state is not JobState.PENDING:
            raise SchedulerError(f"{job.job_id} is {track.state.value}, not PENDING")
        try:
            self._pending.remove(track)
        except ValueError:
            pass
        return self._dispatch(track, node)

    def _dispatch(self, track: _Track, node: NodeId) -> bool:
        if not self.mesh.is_live(node) or node not in self.last_broadcast:
            # nothing started on the node, so no retry is consumed
            self._set(track, JobState.FAILED_RETRYING, node)
            self._set(track, JobState.PENDING, None)
            self._pending.append(track)
            self._ensure_pass(self.cfg.retry_timeout_s)
            return False
        self.mesh.reserve_slot(node)
        self.slots[node] = self.slots.get(node, 0) + 1
        self.dispatch_count += 1
        track.attempts += 1
        track.node = node
        track.node_epoch = self._node_epoch.get(node, 0)
        self._set(track, JobState.DISPATCHED, node)
        now = self.clock.now
        track.times = {"submitted": track.times.get("submitted", 0.0), "dispatched": now}
        job = track.job
        seed = f"{self.seed}:{job.job_id}:{track.attempts}"
        jit = self.cfg.wait_jitter_s
        track.jitter = random.Random(f"jitter:{seed}").uniform(-jit, jit) if jit else 0.0
        track.pair = spawn_pair(job.job_id, seed, self.fixtures.baseline)
        outcome = boot(track.pair, self.ip_fail_prob, seed)
        attempt = track.attempts
        if outcome is VmLifecycle.FAILED_IP_TIMEOUT:
            # the scheduler only looks at a job again when its window is over
            deadline = (now + self.cfg.fixed_wait_s + job.stimulate_s + track.jitter)
            self.clock.call_at(deadline, self._collect_failed, track, attempt, FailureKind.IP_TIMEOUT)
        else:
            self.clock.call_at(now + self.cfg.boot_wait_s + self.cfg.ip_wait_s, self._ready, track, attempt)
        return True

    def stop_and_collect(self, job: Job | str) -> JobResult:
        """Stop a RUNNING job whose window is over and diff its disk.

        The returned result is completed (state DONE) once the forensics wait
        and the result transfer have elapsed on the event loop.
        """
        track = self._track(job)
        if track.state is not JobState.RUNNING:
            raise SchedulerError(f"{track.job.job_id} is {track.state.value}, not RUNNING")
        self._set(track, JobState.COLLECTING)
        track.times["stopped"] = self.clock.now
        pair = track.pair
        snap, net_log, root_flag = stop_and_snapshot(pair)
        fs_diff = diff(self.baseline_snapshot, snap)
        artifacts = extract_artifacts(fs_diff, pair.fs) if not fs_diff.is_empty() else {}
        result = JobResult(
            track.job.job_id, track.state, node=track.node, fs_diff=fs_diff, net_log=net_log,
            interaction_record=pair.interaction_record or InteractionRecord(),
            root_flag=root_flag, crash=pair.crashed, artifacts=artifacts,
        )
        track.result = result
        # node-side copies of the disk images go away with the pair
        track.pair = None
        wait = self.cfg.forensics_wait_s + track.jitter
        self.clock.call_later(wait, self._send_results, track, track.attempts)
        return result

    def on_failure(self, job: Job | str, cause: FailureKind | str) -> JobState:
        """Release the job's slot and either re-queue or abandon it."""
        track = self._track(job)
        cause = FailureKind(cause)
        if track.state in TERMINAL or track.state is JobState.PENDING:
            raise SchedulerError(f"{track.job.job_id} is {track.state.value}; nothing to fail")
        self._release(track)
        track.pair = None
        track.times["failed"] = self.clock.now
        track.failures += 1
        if track.failures > track.job.retry_limit:
            self._set(track, JobState.FAILED_ABANDONED)
            self._publish(track, JobResult(track.job.job_id, track.state, node=track.node,
                                           failure=cause.value))
            return track.state
        self._set(track, JobState.FAILED_RETRYING)
        self._set(track, JobState.PENDING, None)
        track.node = None
        track.result = None
        self._pending.append(track)
        self._ensure_pass()
        return track.state

    # -- event handlers ------------------------------------------------------

    def _stale(self, track: _Track, attempt: int) -> bool:
        return track.attempts != attempt or track.state in TERMINAL or track.state is JobState.PENDING

    def _ready(self, track: _Track, attempt: int) -> None:
        if self._stale(track, attempt):
            return
        if not self._alive(track):
            self.on_failure(track.job, FailureKind.NODE_LOST)
            return
        track.times["ready"] = self.clock.now
        payload = self.mesh.transport.per_job_transfer_mb / 2
        try:
            done = self.mesh.transfer(payload, HEAD, track.node)
        except TransferError:
            self.on_failure(track.job, FailureKind.TRANSFER)
            return
        self.clock.call_at(done, self._install, track, attempt)

    def _install(self, track: _Track, attempt: int) -> None:
        if self._stale(track, attempt):
            return
        if not self._alive(track):
            self.on_failure(track.job, FailureKind.NODE_LOST)
            return
        now = self.clock.now
        track.times["installed"] = now
        app = self.fixtures.app(track.job.app_ref)
        install_and_launch(track.pair, app.model, app.ui_graph, t0=now)
        self._set(track, JobState.RUNNING)
        stimulate(track.pair, track.job.stimulate_s, budget=self.cfg.ui_budget,
                  interval_s=self.cfg.ui_interval_s, cfg=self.explore_cfg)
        self.clock.call_at(now + track.job.stimulate_s, self._stop, track, attempt)

    def _stop(self, track: _Track, attempt: int) -> None:
        if self._stale(track, attempt):
            return
        if not self._alive(track):
            self.on_failure(track.job, FailureKind.NODE_LOST)
            return
        self.stop_and_collect(track.job)

    def _send_results(self, track: _Track, attempt: int) -> None:
        if self._stale(track, attempt):
            return
        if not self._alive(track):
            self.on_failure(track.job, FailureKind.NODE_LOST)
            return
        track.times["forensics_done"] = self.clock.now
        payload = self.mesh.transport.per_job_transfer_mb / 2
        try:
            done = self.mesh.transfer(payload, track.node, HEAD)
        except TransferError:
            self.on_failure(track.job, FailureKind.TRANSFER)
            return
        self.clock.call_at(done, self._finish, track, attempt)

    def _finish(self, track: _Track, attempt: int) -> None:
        if self._stale(track, attempt):
            return
        track.times["done"] = self.clock.now
        self._release(track)
        self._set(track, JobState.DONE)
        self._publish(track, track.result)

    def _collect_failed(self, track: _Track, attempt: int, cause: FailureKind) -> None:
        if self._stale(track, attempt):
            return
        if not self._alive(track):
            self.on_failure(track.job, FailureKind.NODE_LOST)
            return
        try:
            # logs and staged job files come back in one transfer
            done = self.mesh.transfer(self.mesh.transport.per_job_transfer_mb, track.node, HEAD)
        except TransferError:
            self.on_failure(track.job, FailureKind.TRANSFER)
            return
        self.clock.call_at(done, self._fail_after_collect, track, attempt, cause)

    def _fail_after_collect(self, track: _Track, attempt: int, cause: FailureKind) -> None:
        if not self._stale(track, attempt):
            self.on_failure(track.job, cause)

    # -- driver ------------------------------------------------------------------

    def schedule_all(self, jobs: Iterable[Job]) -> list[JobResult]:
        """Run `jobs` to terminal states; results come back in submission order."""
        jobs = list(jobs)
        self.submit(jobs)
        self.clock.run()
        stuck = [t.job.job_id for t in self._tracks.values() if t.state not in TERMINAL]
        if stuck:
            raise SchedulerError(f"event loop drained with live jobs: {stuck[:5]}")
        return [self._results[j.job_id] for j in jobs]

    def results(self) -> list[JobResult]:
        return [t.result for t in sorted(self._tracks.values(), key=lambda t: t.seq)
                if t.state in TERMINAL]

    def write_transitions(self, fh: IO[str]) -> None:
        for entry in self.transitions:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _phase_timings(times: dict[str, float]) -> dict[str, float]:
    order = [("queued", "submitted", "dispatched"), ("boot", "dispatched", "ready"),
             ("transfer_in", "ready", "installed"), ("stimulate", "installed", "stopped"),
             ("forensics", "stopped", "forensics_done"), ("transfer_out", "forensics_done", "done"),
             ("until_failure", "dispatched", "failed")]
    out = {name: round(times[b] - times[a], 6) for name, a, b in order if a in times and b in times}
    end = times.get("done", times.get("failed"))
    if end is not None and "dispatched" in times:
        out["service"] = round(end - times["dispatched"], 6)
    return out
