"""Per-job analysis substrate: a VM + network-responder pair.

Apps are stand-ins described by a :class:`BehaviorModel`: triggers (install,
UI element, periodic timer) mapped to filesystem and network actions. The
interpreter applies those actions to the VM's :class:`VirtualFs` in
timestamp order and logs every request with its canned response.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping

from sandmesh.forensics import APK_MAGIC, SQLITE_MAGIC, FsSnapshot, VirtualFs, snapshot
from sandmesh.uiexplore import ExploreConfig, InteractionRecord, UiGraph, explore

log = logging.getLogger(__name__)

PROTECTED_PREFIX = "/system/"
SUPPORTED_PROTOCOLS = ("DNS", "HTTP", "SMTP")
SINKHOLE_ADDR = "10.0.2.2"
APP_UID = 10050


class ConfigError(Exception):
    """Missing or malformed fixture."""


class SealedError(Exception):
    """The pair has been stopped; its disk and logs are read-only."""


class LifecycleError(Exception):
    """An operation was attempted from the wrong VM lifecycle state."""


class VmLifecycle(str, Enum):
    CREATED = "CREATED"
    BOOTING = "BOOTING"
    ACQUIRING_IP = "ACQUIRING_IP"
    READY = "READY"
    INSTALLING = "INSTALLING"
    STIMULATING = "STIMULATING"
    COLLECTING = "COLLECTING"
    STOPPED = "STOPPED"
    FAILED_IP_TIMEOUT = "FAILED_IP_TIMEOUT"


# Forward chain plus early stops from states where the app is not running yet.
VM_TRANSITIONS: dict[VmLifecycle, frozenset[VmLifecycle]] = {
    VmLifecycle.CREATED: frozenset({VmLifecycle.BOOTING, VmLifecycle.STOPPED}),
    VmLifecycle.BOOTING: frozenset({VmLifecycle.ACQUIRING_IP}),
    VmLifecycle.ACQUIRING_IP: frozenset({VmLifecycle.READY, VmLifecycle.FAILED_IP_TIMEOUT}),
    VmLifecycle.READY: frozenset({VmLifecycle.INSTALLING, VmLifecycle.STOPPED}),
    VmLifecycle.INSTALLING: frozenset({VmLifecycle.STIMULATING}),
    VmLifecycle.STIMULATING: frozenset({VmLifecycle.COLLECTING}),
    VmLifecycle.COLLECTING: frozenset({VmLifecycle.STOPPED}),
    VmLifecycle.STOPPED: frozenset(),
    VmLifecycle.FAILED_IP_TIMEOUT: frozenset(),
}


def valid_vm_history(history: list[VmLifecycle]) -> bool:
    if not history or history[0] is not VmLifecycle.CREATED:
        return False
    return all(b in VM_TRANSITIONS[a] for a, b in zip(history, history[1:]))


# -- behavior models ------------------------------------------------------------


class TriggerKind(str, Enum):
    ON_INSTALL = "on_install"
    ON_UI = "on_ui"
    EVERY = "every"


class ActionKind(str, Enum):
    CREATE_FILE = "CREATE_FILE"
    MODIFY_FILE = "MODIFY_FILE"
    DELETE_FILE = "DELETE_FILE"
    NET_REQUEST = "NET_REQUEST"
    ESCALATE_ROOT = "ESCALATE_ROOT"
    CRASH = "CRASH"


@dataclass(frozen=True)
class Trigger:
    kind: TriggerKind
    element_id: str | None = None
    period_s: float | None = None

    def __post_init__(self) -> None:
        if self.kind is TriggerKind.EVERY and not (self.period_s and self.period_s > 0):
            raise ConfigError("every-trigger needs period_s > 0")
        if self.kind is TriggerKind.ON_UI and not self.element_id:
            raise ConfigError("on_ui trigger needs element_id")


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    path: str | None = None
    content_tag: str | None = None
    host: str | None = None
    protocol: str | None = None
    payload_tag: str | None = None

    def __post_init__(self) -> None:
        if self.kind in (ActionKind.CREATE_FILE, ActionKind.MODIFY_FILE, ActionKind.DELETE_FILE):
            if not self.path or not self.path.startswith("/"):
                raise ConfigError(f"{self.kind.value} needs an absolute path, got {self.path!r}")
        if self.kind is ActionKind.NET_REQUEST and not (self.host and self.protocol):
            raise ConfigError("NET_REQUEST needs host and protocol")

    def to_json(self) -> dict[str, Any]:
        doc: dict[str, Any] = {"kind": self.kind.value}
        for k in ("path", "content_tag", "host", "protocol", "payload_tag"):
            v = getattr(self, k)
            if v is not None:
                doc[k] = v
        return doc


@dataclass(frozen=True)
class Rule:
    trigger: Trigger
    actions: tuple[Action, ...]


@dataclass(frozen=True)
class BehaviorModel:
    app_id: str
    rules: tuple[Rule, ...] = ()

    @classmethod
    def from_json(cls, doc: Mapping[str, Any]) -> "BehaviorModel":
        try:
            rules = []
            for r in doc.get("rules", []):
                t = r["trigger"]
                trig = Trigger(TriggerKind(t["kind"]), t.get("element_id"),
                               float(t["period_s"]) if "period_s" in t else None)
                acts = tuple(
                    Action(ActionKind(a["kind"].upper()), a.get("path"), a.get("content_tag"),
                           a.get("host"), a.get("protocol"), a.get("payload_tag"))
                    for a in r.get("actions", [])
                )
                rules.append(Rule(trig, acts))
            return cls(str(doc["app_id"]), tuple(rules))
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed behavior model: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "BehaviorModel":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read behavior model {path}: {exc}") from exc
        return cls.from_json(doc)

    def to_json(self) -> dict[str, Any]:
        rules = []
        for r in self.rules:
            trig: dict[str, Any] = {"kind": r.trigger.kind.value}
            if r.trigger.element_id is not None:
                trig["element_id"] = r.trigger.element_id
            if r.trigger.period_s is not None:
                trig["period_s"] = r.trigger.period_s
            rules.append({"trigger": trig, "actions": [a.to_json() for a in r.actions]})
        return {"app_id": self.app_id, "rules": rules}


EMPTY_MODEL = BehaviorModel("benign")


def content_for(tag: str | None, path: str) -> bytes:
    """Deterministic synthetic bytes for a content tag.

    ``apk`` yields a ZIP local-file header, ``sqlite`` a database header,
    ``binary`` non-printable noise; anything else is a line of text.
    """
    tag = tag or "data"
    seed = hashlib.sha256(f"{tag}\0{path}".encode()).digest()
    if tag == "apk":
        return APK_MAGIC + b"\x14\x00\x00\x00\x08\x00" + b"AndroidManifest.xml" + seed * 8
    if tag == "sqlite":
        return SQLITE_MAGIC + b"\x10\x00\x01\x01" + seed * 4
    if tag == "binary":
        return bytes(b | 0x80 for b in seed * 4)
    return f"{tag}:{path}:{seed.hex()[:16]}\n".encode("ascii")


def load_baseline(doc: Mapping[str, Any]) -> VirtualFs:
    """Build the pristine VM image from a baseline fixture document."""
    try:
        epoch = int(doc.get("epoch", 0))
        fs = VirtualFs(epoch=epoch, next_ino=int(doc.get("next_ino", 100000)))
        for f in doc["files"]:
            content = content_for(f.get("content_tag"), f["path"])
            vf = fs.write(f["path"], content, t=0, uid=int(f.get("uid", 1000)),
                          gid=int(f.get("gid", f.get("uid", 1000))), mode=int(f.get("mode", 0o100644)))
            if "ino" in f:
                vf.stat = replace(vf.stat, ino=int(f["ino"]))
        return fs
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed baseline image: {exc!r}") from exc


# -- the pair -----------------------------------------------------------------


@dataclass(frozen=True)
class NetLogEntry:
    timestamp_s: float
    direction: str
    protocol: str
    host: str
    payload_tag: str
    byte_count: int

    def to_json(self) -> dict[str, Any]:
        return {
            "timestamp_s": self.timestamp_s,
            "direction": self.direction,
            "protocol": self.protocol,
            "host": self.host,
            "payload_tag": self.payload_tag,
            "byte_count": self.byte_count,
        }


@dataclass
class SandboxPair:
    job_id: str
    fs: VirtualFs
    baseline: VirtualFs
    seed: int | str
    state: VmLifecycle = VmLifecycle.CREATED
    history: list[VmLifecycle] = field(default_factory=lambda: [VmLifecycle.CREATED])
    net_log: list[NetLogEntry] = field(default_factory=list)
    root_flag: bool = False
    crashed: bool = False
    crash_at: float | None = None
    sealed: bool = False
    model: BehaviorModel = EMPTY_MODEL
    ui_graph: UiGraph | None = None
    t0: float = 0.0
    clock_s: float = 0.0
    denied: list[tuple[float, Action]] = field(default_factory=list)
    fired: list[tuple[float, Action]] = field(default_factory=list)
    interaction_record: InteractionRecord | None = None
    _timer_counts: dict[int, int] = field(default_factory=dict)

    def _to(self, new: VmLifecycle) -> None:
        if new not in VM_TRANSITIONS[self.state]:
            raise LifecycleError(f"{self.job_id}: illegal VM transition {self.state.value} -> {new.value}")
        self.state = new
        self.history.append(new)

    def _require(self, *states: VmLifecycle) -> None:
        if self.sealed:
            raise SealedError(f"{self.job_id}: pair is sealed")
        if self.state not in states:
            raise LifecycleError(f"{self.job_id}: expected {[s.value for s in states]}, in {self.state.value}")

    # -- action interpreter -------------------------------------------------

    def apply(self, action: Action, t: float) -> None:
        """Apply one action at pair-relative time `t`."""
        if self.sealed:
            raise SealedError(f"{self.job_id}: pair is sealed")
        if self.crashed:
            return
        if t < self.clock_s:
            raise ValueError(f"action at {t} precedes pair clock {self.clock_s}")
        self.clock_s = t
        kind = action.kind
        if kind in (ActionKind.CREATE_FILE, ActionKind.MODIFY_FILE, ActionKind.DELETE_FILE):
            if action.path.startswith(PROTECTED_PREFIX) and not self.root_flag:
                self.denied.append((t, action))
                log.debug("%s: write to %s denied without root", self.job_id, action.path)
                return
            uid = 0 if self.root_flag and action.path.startswith(PROTECTED_PREFIX) else APP_UID
            if kind is ActionKind.DELETE_FILE:
                self.fs.delete(action.path)
            else:
                self.fs.write(action.path, content_for(action.content_tag, action.path),
                              t=self.t0 + t, uid=uid)
        elif kind is ActionKind.NET_REQUEST:
            payload = (action.payload_tag or "").encode()
            req = NetLogEntry(self.t0 + t, "request", action.protocol.upper(), action.host,
                              action.payload_tag or "", len(payload))
            self.net_log.append(req)
            self.net_log.append(netsim_respond(req))
        elif kind is ActionKind.ESCALATE_ROOT:
            self.root_flag = True
        elif kind is ActionKind.CRASH:
            self.crashed = True
            self.crash_at = t
        self.fired.append((t, action))

    def fire(self, trigger: TriggerKind, t: float, element_id: str | None = None) -> list[Action]:
        out = []
        for rule in self.model.rules:
            if rule.trigger.kind is not trigger:
                continue
            if trigger is TriggerKind.ON_UI and rule.trigger.element_id != element_id:
                continue
            for action in rule.actions:
                if self.crashed:
                    return out
                self.apply(action, t)
                out.append(action)
        return out


def spawn_pair(job_id: str, seed: int | str, baseline: VirtualFs | None) -> SandboxPair:
    if baseline is None:
        raise ConfigError("no baseline image configured")
    return SandboxPair(job_id=job_id, fs=baseline.copy(), baseline=baseline, seed=seed)


def boot(pair: SandboxPair, ip_fail_prob: float, seed: int | str) -> VmLifecycle:
    """Boot the VM and wait for an address; the outcome depends only on `seed`."""
    if not 0.0 <= ip_fail_prob <= 1.0:
        raise ValueError("ip_fail_prob must be a probability")
    pair._require(VmLifecycle.CREATED)
    pair._to(VmLifecycle.BOOTING)
    pair._to(VmLifecycle.ACQUIRING_IP)
    failed = random.Random(f"boot:{seed}").random() < ip_fail_prob
    pair._to(VmLifecycle.FAILED_IP_TIMEOUT if failed else VmLifecycle.READY)
    return pair.state


def install_and_launch(pair: SandboxPair, model: BehaviorModel, ui_graph: UiGraph | None = None,
                       *, t0: float | None = None) -> VmLifecycle:
    """Install the app, fire its install rules and start stimulation.

    A crash during install still leaves the pair STIMULATING so the
    scheduler collects the disk as usual.
    """
    pair._require(VmLifecycle.READY)
    pair._to(VmLifecycle.INSTALLING)
    pair.model = model
    pair.ui_graph = ui_graph
    if t0 is not None:
        pair.t0 = t0
    pair.fire(TriggerKind.ON_INSTALL, 0.0)
    pair._timer_counts = {i: 0 for i, r in enumerate(model.rules) if r.trigger.kind is TriggerKind.EVERY}
    pair._to(VmLifecycle.STIMULATING)
    return pair.state


def run_timers(pair: SandboxPair, elapsed_s: float) -> list[Action]:
    """Fire every periodic rule due in (last call, elapsed_s], in time order.

    A firing exactly at `elapsed_s` is included.
    """
    pair._require(VmLifecycle.STIMULATING)
    due: list[tuple[float, int, int]] = []
    for i, count in pair._timer_counts.items():
        period = pair.model.rules[i].trigger.period_s
        total = int(elapsed_s // period)
        for k in range(count + 1, total + 1):
            due.append((k * period, i, k))
        pair._timer_counts[i] = max(count, total)
    fired: list[Action] = []
    for t, i, _k in sorted(due):
        if pair.crashed:
            break
        for action in pair.model.rules[i].actions:
            if pair.crashed:
                break
            pair.apply(action, max(t, pair.clock_s))
            fired.append(action)
    if not pair.crashed:
        pair.clock_s = max(pair.clock_s, elapsed_s)
    return fired


def stimulate(pair: SandboxPair, stimulate_s: float, *, budget: int = 100,
              interval_s: float = 2.0, cfg: ExploreConfig | None = None) -> InteractionRecord:
    """Drive the UI explorer through the window, interleaving timer rules.

    Interaction k happens at ``k * interval_s``; only interactions that fit
    inside the window are attempted.
    """
    pair._require(VmLifecycle.STIMULATING)
    if pair.ui_graph is None or pair.crashed:
        record = InteractionRecord([], (cfg or ExploreConfig()).input_classes())
    else:
        fit = int(stimulate_s // interval_s) if interval_s > 0 else budget
        step = [0]

        def hook(state_id: str, element_id: str) -> None:
            step[0] += 1
            t = step[0] * interval_s
            run_timers(pair, t)
            pair.fire(TriggerKind.ON_UI, max(t, pair.clock_s), element_id)

        record = explore(pair.ui_graph, min(budget, fit), cfg, hook)
        if record.crashed() and not pair.crashed:
            pair.crashed = True
            pair.crash_at = step[0] * interval_s
    pair.interaction_record = record
    run_timers(pair, stimulate_s)
    return record


def netsim_respond(request: NetLogEntry) -> NetLogEntry:
    """Canned answer from the fake-internet responder; never drops a request."""
    proto = request.protocol.upper()
    if proto == "DNS":
        tag, size = f"A {SINKHOLE_ADDR}", 32
    elif proto == "HTTP":
        tag, size = "200 OK", 256
    elif proto == "SMTP":
        tag, size = "250 OK", 16
    else:
        tag, size = "REFUSED", 0
    return NetLogEntry(request.timestamp_s, "response", proto, request.host, tag, size)


def stop_and_snapshot(pair: SandboxPair) -> tuple[FsSnapshot, tuple[NetLogEntry, ...], bool]:
    """Stop the VM and freeze its disk; nothing can be appended afterwards."""
    if pair.sealed:
        raise SealedError(f"{pair.job_id}: already stopped")
    if pair.state is VmLifecycle.STIMULATING:
        pair._to(VmLifecycle.COLLECTING)
    if pair.state is not VmLifecycle.FAILED_IP_TIMEOUT:
        pair._to(VmLifecycle.STOPPED)
    pair.sealed = True
    snap = snapshot(pair.fs, timestamp=pair.fs.epoch + int(pair.t0 + pair.clock_s))
    return snap, tuple(pair.net_log), pair.root_flag
