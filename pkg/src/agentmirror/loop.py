"""Event loops that drive every agent.

``SimLoop`` runs on a simulated clock: time only moves when the loop jumps
to the next scheduled event, so heartbeat and timeout behaviour is exactly
reproducible. ``RealLoop`` uses the monotonic wall clock and accepts
callbacks from other threads (socket readers); it is used for the socket
transport.

Both loops run callbacks one at a time, in (time, submission order).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from typing import Callable

log = logging.getLogger(__name__)


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: float, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimLoop:
    """Discrete-event loop on a simulated clock (seconds, starting at 0)."""

    realtime = False

    def __init__(self, start: float = 0.0):
        self._now = start
        self._queue: list = []
        self._counter = itertools.count()
        self.events_run = 0

    def now(self) -> float:
        return self._now

    def call_at(self, when: float, fn: Callable, *args) -> Timer:
        if when < self._now:
            when = self._now
        t = Timer(when, fn, args)
        heapq.heappush(self._queue, (when, next(self._counter), t))
        return t

    def call_later(self, delay: float, fn: Callable, *args) -> Timer:
        return self.call_at(self._now + max(delay, 0.0), fn, *args)

    def call_soon(self, fn: Callable, *args) -> Timer:
        return self.call_at(self._now, fn, *args)

    call_soon_threadsafe = call_soon

    def pending(self) -> int:
        return sum(1 for _, _, t in self._queue if not t.cancelled)

    def next_time(self) -> float | None:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        """Run the next live event. Returns False when nothing is scheduled."""
        q = self._queue
        while q:
            when, _, t = heapq.heappop(q)
            if t.cancelled:
                continue
            self._now = when
            self.events_run += 1
            t.fn(*t.args)
            return True
        return False

    def run_until(self, predicate: Callable[[], bool] | None = None, timeout: float | None = None,
                  max_events: int | None = None) -> bool:
        """Run events until ``predicate()`` holds.

        ``timeout`` is in simulated seconds. Returns whether the predicate
        became true (always False when no predicate is given).
        """
        deadline = None if timeout is None else self._now + timeout
        ran = 0
        while True:
            if predicate is not None and predicate():
                return True
            nxt = self.next_time()
            if nxt is None:
                return False
            if deadline is not None and nxt > deadline:
                self._now = max(self._now, deadline)
                return False
            self.step()
            ran += 1
            if max_events is not None and ran >= max_events:
                return bool(predicate and predicate())

    def run_for(self, duration: float) -> None:
        self.run_until(None, timeout=duration)

    def drain(self) -> None:
        """Run everything due at the current instant without advancing time."""
        while True:
            nxt = self.next_time()
            if nxt is None or nxt > self._now:
                return
            self.step()


class RealLoop:
    """Wall-clock loop; callbacks may be submitted from any thread."""

    realtime = True

    def __init__(self):
        self._queue: list = []
        self._counter = itertools.count()
        self._cond = threading.Condition()
        self.events_run = 0

    def now(self) -> float:
        return time.monotonic()

    def call_at(self, when: float, fn: Callable, *args) -> Timer:
        t = Timer(when, fn, args)
        with self._cond:
            heapq.heappush(self._queue, (when, next(self._counter), t))
            self._cond.notify()
        return t

    def call_later(self, delay: float, fn: Callable, *args) -> Timer:
        return self.call_at(self.now() + max(delay, 0.0), fn, *args)

    def call_soon(self, fn: Callable, *args) -> Timer:
        return self.call_at(self.now(), fn, *args)

    call_soon_threadsafe = call_soon

    def _pop_due(self, limit: float):
        with self._cond:
            while True:
                while self._queue and self._queue[0][2].cancelled:
                    heapq.heappop(self._queue)
                now = self.now()
                if self._queue and self._queue[0][0] <= now:
                    return heapq.heappop(self._queue)[2]
                wait = limit - now
                if self._queue:
                    wait = min(wait, self._queue[0][0] - now)
                if wait <= 0:
                    return None
                self._cond.wait(wait)

    def run_until(self, predicate: Callable[[], bool] | None = None, timeout: float | None = None,
                  max_events: int | None = None) -> bool:
        deadline = self.now() + (timeout if timeout is not None else float("inf"))
        ran = 0
        while True:
            if predicate is not None and predicate():
                return True
            # wake at least every 50 ms so the predicate is re-checked
            t = self._pop_due(min(deadline, self.now() + 0.05))
            if t is None:
                if self.now() >= deadline:
                    return False
                continue
            self.events_run += 1
            try:
                t.fn(*t.args)
            except Exception:
                log.exception("callback %r failed", t.fn)
            ran += 1
            if max_events is not None and ran >= max_events:
                return bool(predicate and predicate())

    def run_for(self, duration: float) -> None:
        self.run_until(None, timeout=duration)

    def drain(self) -> None:
        while True:
            t = self._pop_due(self.now())
            if t is None:
                return
            self.events_run += 1
            t.fn(*t.args)
