"""Deterministic discrete-event loop driven by a virtual clock."""

from __future__ import annotations

import heapq
import itertools
from typing import Any, Callable


class EventLoop:
    """Priority queue of timestamped callbacks.

    Events at equal timestamps run in scheduling order, so a run is a pure
    function of the callbacks and their arguments.
    """

    def __init__(self, start: float = 0.0) -> None:
        self._now = float(start)
        self._queue: list[tuple[float, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()
        self.events_run = 0

    @property
    def now(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable[..., Any], *args: Any) -> None:
        if when < self._now:
            raise ValueError(f"cannot schedule in the past: {when} < {self._now}")
        heapq.heappush(self._queue, (when, next(self._seq), fn, args))

    def call_later(self, delay: float, fn: Callable[..., Any], *args: Any) -> None:
        self.call_at(self._now + delay, fn, *args)

    def pending(self) -> int:
        return len(self._queue)

    def run(self, until: float | None = None) -> float:
        """Run events in time order; stop when the queue drains or `until` passes."""
        while self._queue:
            when = self._queue[0][0]
            if until is not None and when > until:
                self._now = until
                break
            when, _, fn, args = heapq.heappop(self._queue)
            self._now = when
            fn(*args)
            self.events_run += 1
        return self._now
