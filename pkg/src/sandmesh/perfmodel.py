"""Runtime bounds and virtual-clock cluster runs for scaling studies.

:func:`simulate_run` builds a mesh of simulated nodes, drives the real
scheduler and sandboxes over it and measures wall time and head-link
occupancy. :func:`sweep` repeats that over node counts for strong-scaling
tables.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from sandmesh.fixtures import FixtureSet
from sandmesh.mesh import Mesh, NodeStats, TransportConfig
from sandmesh.scheduler import Job, JobResult, JobState, ScheduleConfig, Scheduler
from sandmesh.simclock import EventLoop
from sandmesh.uiexplore import ExploreConfig

# 30 MB per job (APK in, results out) over a gigabit head link
PER_JOB_TRANSFER_MB = 30.0
NODE_RAM_MB = 12288.0
NODE_BASE_RAM_USED_MB = 1024.0
NODE_BASE_LOAD = 0.1

SWEEP_COLUMNS = ("n_nodes", "wall_time_s", "comm_time_s", "comm_fraction",
                 "jobs_done", "jobs_failed", "speedup", "ideal_speedup")


@dataclass(frozen=True)
class ClusterSpec:
    n_nodes: int = 188
    vms_per_node: int = 3
    node_failure_ids: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        if self.n_nodes < 1 or self.vms_per_node < 1:
            raise ValueError(f"{'n_nodes' if self.n_nodes < 1 else 'vms_per_node'} must be >= 1")
        object.__setattr__(self, "node_failure_ids", frozenset(self.node_failure_ids))

    def node_ids(self) -> list[str]:
        return [node_name(i) for i in range(self.n_nodes)]


def node_name(i: int) -> str:
    return f"node-{i:03d}"


@dataclass(frozen=True)
class WorkloadSpec:
    n_jobs: int = 1261
    stimulate_s: float = 300.0
    fixed_wait_s: float = 220.0
    wait_jitter_s: float = 0.0
    app_refs: tuple[str, ...] = ("benign",)
    retry_limit: int = 0

    def __post_init__(self) -> None:
        if self.n_jobs < 0:
            raise ValueError("n_jobs must be non-negative")
        if self.stimulate_s <= 0:
            raise ValueError("stimulate_s must be positive")
        if self.fixed_wait_s < 0:
            raise ValueError("fixed_wait_s must be non-negative")
        if not 0 <= self.wait_jitter_s < max(self.fixed_wait_s, 1e-12):
            raise ValueError("wait_jitter_s must be non-negative and below fixed_wait_s")
        if not self.app_refs:
            raise ValueError("app_refs must not be empty")
        if self.retry_limit < 0:
            raise ValueError("retry_limit must be non-negative")
        object.__setattr__(self, "app_refs", tuple(self.app_refs))

    @property
    def per_job_service_s(self) -> float:
        return self.stimulate_s + self.fixed_wait_s

    def jobs(self) -> list[Job]:
        width = max(4, len(str(self.n_jobs)))
        return [
            Job(f"job-{i:0{width}d}", app_ref=self.app_refs[i % len(self.app_refs)],
                stimulate_s=self.stimulate_s, retry_limit=self.retry_limit)
            for i in range(self.n_jobs)
        ]


@dataclass(frozen=True)
class CommSpec:
    per_job_comm_s: float = 0.24

    def __post_init__(self) -> None:
        if self.per_job_comm_s < 0:
            raise ValueError("per_job_comm_s must be non-negative")

    def transport(self) -> TransportConfig:
        if self.per_job_comm_s == 0:
            return TransportConfig(latency_s=0.0, head_bandwidth_mbps=1000.0, per_job_transfer_mb=0.0)
        bw = PER_JOB_TRANSFER_MB * 8.0 / self.per_job_comm_s
        return TransportConfig(latency_s=0.0, head_bandwidth_mbps=bw, per_job_transfer_mb=PER_JOB_TRANSFER_MB)


@dataclass
class PerfReport:
    n_nodes: int
    wall_time_s: float
    comm_time_s: float
    jobs_done: int
    jobs_failed: int
    jobs_dispatched: int
    utilization: dict[str, float] = field(default_factory=dict)
    results: list[JobResult] = field(default_factory=list, repr=False)
    transitions: list[dict] = field(default_factory=list, repr=False)

    @property
    def comm_fraction(self) -> float:
        return self.comm_time_s / self.wall_time_s if self.wall_time_s > 0 else 0.0

    @property
    def n_jobs(self) -> int:
        return self.jobs_done + self.jobs_failed

    @property
    def throughput_per_hour(self) -> float:
        return self.n_jobs / self.wall_time_s * 3600.0 if self.wall_time_s > 0 else 0.0


def theoretical_runtime(n_jobs: int, n_nodes: int, vms_per_node: int, per_job_s: float) -> float:
    """Perfectly pipelined bound: total job-seconds spread over every slot."""
    if n_nodes <= 0 or vms_per_node <= 0:
        raise ValueError("cluster has zero capacity")
    if n_jobs < 0 or per_job_s < 0:
        raise ValueError("n_jobs and per_job_s must be non-negative")
    return n_jobs * per_job_s / (n_nodes * vms_per_node)


def wave_bound(n_jobs: int, slots: int, per_job_s: float) -> float:
    """Lockstep bound: full waves of `slots` jobs, each `per_job_s` long."""
    return -(-n_jobs // slots) * per_job_s


def build_mesh(cluster: ClusterSpec, comm: CommSpec, clock: EventLoop | None = None) -> Mesh:
    """Mesh of identical 12 GB nodes; ids listed in `node_failure_ids` never join."""
    mesh = Mesh(comm.transport(), clock or EventLoop())
    for node in cluster.node_ids():
        if node in cluster.node_failure_ids:
            continue
        mesh.join(NodeStats(node, NODE_RAM_MB, NODE_RAM_MB - NODE_BASE_RAM_USED_MB,
                            NODE_BASE_LOAD, 0, cluster.vms_per_node))
    return mesh


def simulate_run(
    cluster: ClusterSpec | None = None,
    workload: WorkloadSpec | None = None,
    comm: CommSpec | None = None,
    ip_fail_prob: float = 0.03,
    seed: int | str = 0,
    *,
    schedule: ScheduleConfig | None = None,
    fixtures: FixtureSet | None = None,
    explore_cfg: ExploreConfig | None = None,
    keep_results: bool = False,
) -> PerfReport:
    cluster = cluster or ClusterSpec()
    workload = workload or WorkloadSpec()
    comm = comm or CommSpec()
    if schedule is None:
        schedule = ScheduleConfig.with_fixed_wait(
            workload.fixed_wait_s, max_vms_per_node=cluster.vms_per_node,
            wait_jitter_s=workload.wait_jitter_s,
        )
    mesh = build_mesh(cluster, comm)
    sched = Scheduler(mesh, schedule, fixtures or _default_fixtures(), ip_fail_prob=ip_fail_prob,
                      seed=seed, explore_cfg=explore_cfg)
    results = sched.schedule_all(workload.jobs())
    wall = max((e["timestamp_s"] for e in sched.transitions), default=0.0)
    done = sum(1 for r in results if r.state is JobState.DONE)
    busy: dict[str, float] = {}
    for r in results:
        if r.node is not None and "service" in r.timings:
            busy[r.node] = busy.get(r.node, 0.0) + r.timings["service"]
    util = {}
    if wall > 0:
        for node in mesh.members():
            util[node] = busy.get(node, 0.0) / (wall * cluster.vms_per_node)
    return PerfReport(
        n_nodes=cluster.n_nodes,
        wall_time_s=wall,
        comm_time_s=mesh.head_busy_s,
        jobs_done=done,
        jobs_failed=len(results) - done,
        jobs_dispatched=sched.dispatch_count,
        utilization=dict(sorted(util.items())),
        results=results if keep_results else [],
        transitions=sched.transitions if keep_results else [],
    )


_FIXTURES: FixtureSet | None = None


def _default_fixtures() -> FixtureSet:
    global _FIXTURES
    if _FIXTURES is None:
        _FIXTURES = FixtureSet.builtin()
    return _FIXTURES


@dataclass
class SweepRow:
    report: PerfReport
    speedup: float = float("nan")
    ideal_speedup: float = float("nan")

    @property
    def n_nodes(self) -> int:
        return self.report.n_nodes

    def as_dict(self) -> dict[str, float | int]:
        r = self.report
        return {
            "n_nodes": r.n_nodes,
            "wall_time_s": round(r.wall_time_s, 3),
            "comm_time_s": round(r.comm_time_s, 3),
            "comm_fraction": round(r.comm_fraction, 6),
            "jobs_done": r.jobs_done,
            "jobs_failed": r.jobs_failed,
            "speedup": round(self.speedup, 6),
            "ideal_speedup": round(self.ideal_speedup, 6),
        }


def sweep(
    node_counts: Sequence[int],
    cluster: ClusterSpec | None = None,
    workload: WorkloadSpec | None = None,
    comm: CommSpec | None = None,
    ip_fail_prob: float = 0.03,
    seed: int | str = 0,
    *,
    baseline_count: int | None = None,
    schedule: ScheduleConfig | None = None,
    fixtures: FixtureSet | None = None,
    explore_cfg: ExploreConfig | None = None,
) -> list[SweepRow]:
    """One run per node count with the same seed; rows sorted by node count.

    Speedups are filled in relative to `baseline_count` (default: the
    smallest count).
    """
    if not node_counts:
        raise ValueError("node_counts must not be empty")
    if any(n < 1 for n in node_counts):
        raise ValueError("node counts must be positive")
    base = cluster or ClusterSpec()
    rows = []
    for n in sorted(set(node_counts)):
        spec = ClusterSpec(n, base.vms_per_node, base.node_failure_ids)
        rows.append(SweepRow(simulate_run(spec, workload, comm, ip_fail_prob, seed, schedule=schedule,
                                          fixtures=fixtures, explore_cfg=explore_cfg)))
    ref = baseline_count if baseline_count is not None else rows[0].n_nodes
    for row, (n, s, ideal) in zip(rows, speedup(rows, ref)):
        row.speedup, row.ideal_speedup = s, ideal
    return rows


def speedup(table: Iterable[SweepRow | PerfReport], baseline_count: int) -> list[tuple[int, float, float]]:
    """(n_nodes, speedup, ideal) with speedup(baseline) pinned to baseline_count.

    speedup(N) = baseline_count * wall(baseline) / wall(N); ideal(N) = N.
    """
    reports = [r.report if isinstance(r, SweepRow) else r for r in table]
    by_n = {r.n_nodes: r for r in reports}
    if baseline_count not in by_n:
        raise ValueError(f"baseline count {baseline_count} not in table")
    base_wall = by_n[baseline_count].wall_time_s
    return [(r.n_nodes, baseline_count * base_wall / r.wall_time_s, float(r.n_nodes)) for r in reports]


def parallel_efficiency(rows: Sequence[SweepRow], n_nodes: int) -> float:
    row = next(r for r in rows if r.n_nodes == n_nodes)
    return row.speedup / row.ideal_speedup


def sweep_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row.as_dict())
    return buf.getvalue()
