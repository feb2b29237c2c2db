"""Deterministic discrete-event scheduler on a virtual clock."""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Any, Callable, Generator

Process = Generator[float, None, Any]


class VirtualClock:
    """Event queue ordered by (time, insertion sequence).

    Processes are generators that yield the delay until they next resume.
    """

    def __init__(self, start: float = 0.0) -> None:
        self.now = start
        self._queue: list[tuple[float, int, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()

    def __len__(self) -> int:
        return len(self._queue)

    def schedule(self, at: float, callback: Callable[..., Any], *args: Any) -> None:
        if at < self.now:
            raise ValueError(f"cannot schedule at {at} before now={self.now}")
        heapq.heappush(self._queue, (at, next(self._seq), callback, args))

    def call_later(self, delay: float, callback: Callable[..., Any], *args: Any) -> None:
        self.schedule(self.now + delay, callback, *args)

    def spawn(self, process: Process, delay: float = 0.0) -> None:
        self.call_later(delay, self._resume, process)

    def _resume(self, process: Process) -> None:
        try:
            delay = next(process)
        except StopIteration:
            return
        if delay < 0:
            raise ValueError(f"process yielded a negative delay {delay}")
        self.call_later(delay, self._resume, process)

    def peek(self) -> float | None:
        return self._queue[0][0] if self._queue else None

    def step(self) -> None:
        at, _, callback, args = heapq.heappop(self._queue)
        self.now = at
        callback(*args)

    def run(self, until: float) -> None:
        """Process every event strictly before ``until``."""
        while self._queue and self._queue[0][0] < until:
            self.step()

    def run_realtime(
        self,
        until: float,
        time_scale: float = 1.0,
        stop: threading.Event | None = None,
    ) -> bool:
        """Like :meth:`run`, pacing events so one wall second covers ``time_scale``
        virtual seconds.  Returns False if ``stop`` was set before the end."""
        stop = stop or threading.Event()
        wall0 = time.monotonic()
        virt0 = self.now
        while self._queue and self._queue[0][0] < until:
            due = wall0 + (self._queue[0][0] - virt0) / time_scale
            wait = due - time.monotonic()
            if wait > 0 and stop.wait(wait):
                return False
            if stop.is_set():
                return False
            self.step()
        return not stop.is_set()
