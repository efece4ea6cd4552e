"""Cluster membership and head-node transport over a star topology.

The simulated transport runs on an :class:`~sandmesh.simclock.EventLoop`.
Broadcasts are answered by every live member whose response latency fits
inside the timeout; transfers touching the head node queue FIFO on the
single head link.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Callable

from sandmesh.simclock import EventLoop

NodeId = str

HEAD: NodeId = "head"


class MembershipError(Exception):
    """Raised when a join would duplicate a live member."""


class TransferError(Exception):
    """Raised when a transfer endpoint is not live."""


@dataclass(frozen=True, slots=True)
class NodeStats:
    node: NodeId
    ram_total_mb: float
    ram_free_mb: float
    load_avg: float
    active_vms: int
    max_vms: int

    def __post_init__(self) -> None:
        if not 0 <= self.ram_free_mb <= self.ram_total_mb:
            raise ValueError(f"{self.node}: ram_free_mb must lie in [0, ram_total_mb]")
        if self.max_vms < 0 or not 0 <= self.active_vms <= self.max_vms:
            raise ValueError(f"{self.node}: need 0 <= active_vms <= max_vms")
        if self.load_avg < 0:
            raise ValueError(f"{self.node}: load_avg must be non-negative")


@dataclass(frozen=True)
class TransportConfig:
    latency_s: float = 0.0
    head_bandwidth_mbps: float = 1000.0
    per_job_transfer_mb: float = 30.0

    def __post_init__(self) -> None:
        if self.latency_s < 0 or self.per_job_transfer_mb < 0:
            raise ValueError("transport parameters must be non-negative")
        if self.head_bandwidth_mbps <= 0:
            raise ValueError("head_bandwidth_mbps must be positive")

    def duration(self, payload_mb: float) -> float:
        return self.latency_s + payload_mb * 8.0 / self.head_bandwidth_mbps


@dataclass
class _Member:
    base: NodeStats
    active_vms: int
    latency_s: float | None
    cached: NodeStats | None = None


@dataclass(frozen=True)
class HeadTransfer:
    start: float
    end: float
    src: NodeId
    dst: NodeId
    payload_mb: float


class Mesh:
    """Flat head-plus-workers cluster.

    Each reserved slot consumes ``vm_ram_mb`` of reported free RAM and adds
    ``vm_load`` to the reported load average, so broadcast stats reflect the
    work the scheduler has placed.
    """

    def __init__(
        self,
        transport: TransportConfig | None = None,
        clock: EventLoop | None = None,
        *,
        vm_ram_mb: float = 2048.0,
        vm_load: float = 1.0,
    ) -> None:
        self.transport = transport or TransportConfig()
        self.clock = clock or EventLoop()
        self.vm_ram_mb = vm_ram_mb
        self.vm_load = vm_load
        self._members: dict[NodeId, _Member] = {}
        self._pending_leaves: dict[NodeId, float] = {}
        self._lock = threading.RLock()
        self._head_free_at = 0.0
        self.head_busy_s = 0.0
        self.head_log: list[HeadTransfer] = []
        self.listeners: list[Callable[[str, NodeId], None]] = []

    # -- membership -------------------------------------------------------

    def join(self, node: NodeStats, *, latency_s: float | None = None) -> frozenset[NodeId]:
        with self._lock:
            if node.node in self._members:
                raise MembershipError(f"node {node.node!r} is already a live member")
            self._members[node.node] = _Member(node, node.active_vms, latency_s)
            self._pending_leaves.pop(node.node, None)
            for cb in self.listeners:
                cb("join", node.node)
            return self.members()

    def leave(self, node: NodeId) -> frozenset[NodeId]:
        with self._lock:
            if self._members.pop(node, None) is not None:
                for cb in self.listeners:
                    cb("leave", node)
            self._pending_leaves.pop(node, None)
            return self.members()

    def fail_at(self, node: NodeId, when: float) -> None:
        """Schedule `node` to go silent at virtual time `when`."""
        with self._lock:
            self._pending_leaves[node] = min(when, self._pending_leaves.get(node, when))
        self.clock.call_at(when, self._scheduled_leave, node, when)

    def _scheduled_leave(self, node: NodeId, when: float) -> None:
        if self._pending_leaves.get(node) == when:
            self.leave(node)

    def members(self) -> frozenset[NodeId]:
        with self._lock:
            return frozenset(self._members)

    def is_live(self, node: NodeId) -> bool:
        if node == HEAD:
            return True
        with self._lock:
            return node in self._members

    # -- per-node resource accounting --------------------------------------

    def stats(self, node: NodeId) -> NodeStats:
        with self._lock:
            m = self._members[node]
            return self._stats_of(m)

    def _stats_of(self, m: _Member) -> NodeStats:
        if m.cached is None:
            m.cached = self._compute_stats(m)
        return m.cached

    def _compute_stats(self, m: _Member) -> NodeStats:
        base = m.base
        extra = m.active_vms - base.active_vms
        if extra == 0:
            return base
        return replace(
            base,
            ram_free_mb=min(base.ram_total_mb, max(0.0, base.ram_free_mb - extra * self.vm_ram_mb)),
            load_avg=max(0.0, base.load_avg + extra * self.vm_load),
            active_vms=m.active_vms,
        )

    def reserve_slot(self, node: NodeId) -> int:
        with self._lock:
            m = self._members.get(node)
            if m is None:
                raise TransferError(f"node {node!r} is not live")
            if m.active_vms >= m.base.max_vms:
                raise ValueError(f"node {node!r} has no free VM slot")
            m.active_vms += 1
            m.cached = None
            return m.active_vms

    def release_slot(self, node: NodeId) -> int | None:
        """Free one slot; a no-op for nodes that have left (their state is gone)."""
        with self._lock:
            m = self._members.get(node)
            if m is None:
                return None
            if m.active_vms <= 0:
                raise ValueError(f"node {node!r} has no reserved slot to release")
            m.active_vms -= 1
            m.cached = None
            return m.active_vms

    # -- messaging ----------------------------------------------------------

    def broadcast_stats(self, timeout_s: float) -> list[NodeStats]:
        """Collect stats from live nodes answering within `timeout_s`, sorted by id.

        A node scheduled to leave before its response would arrive stays silent.
        """
        now = self.clock.now
        default_latency = self.transport.latency_s
        out = []
        with self._lock:
            for node_id in sorted(self._members):
                m = self._members[node_id]
                latency = default_latency if m.latency_s is None else m.latency_s
                if latency > timeout_s:
                    continue
                leave_at = self._pending_leaves.get(node_id)
                if leave_at is not None and leave_at <= now + latency:
                    continue
                out.append(self._stats_of(m))
        return out

    def transfer(self, payload_mb: float, src: NodeId, dst: NodeId) -> float:
        """Charge a transfer and return its virtual completion time."""
        if payload_mb < 0:
            raise ValueError("payload_mb must be non-negative")
        for end in (src, dst):
            if not self.is_live(end):
                raise TransferError(f"transfer endpoint {end!r} is not live")
        now = self.clock.now
        duration = self.transport.duration(payload_mb)
        if HEAD not in (src, dst):
            return now + duration
        with self._lock:
            start = max(now, self._head_free_at)
            end = start + duration
            self._head_free_at = end
            self.head_busy_s += duration
            self.head_log.append(HeadTransfer(start, end, src, dst, payload_mb))
        return end
