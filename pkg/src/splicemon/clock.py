"""Clocks and single-threaded event loops.

Everything downstream schedules work through a loop exposing ``now_ns``,
``call_soon``, ``call_later`` and ``call_soon_threadsafe``. :class:`SimLoop`
runs on a :class:`VirtualClock` that only moves when an event is due, so
timing in simulation is exact. :class:`RealLoop` runs on the monotonic
clock in a dedicated thread.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import threading
import time
from collections import deque
from typing import Callable

log = logging.getLogger(__name__)

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


class ClockRegression(RuntimeError):
    """A monotonic clock went backwards."""


class MonotonicClock:
    """Nanosecond monotonic clock; unaffected by wall-clock adjustments."""

    def now_ns(self) -> int:
        return time.monotonic_ns()

    def wall(self) -> float:
        return time.time()


class VirtualClock:
    """Simulated time. Only :meth:`advance_to` and :meth:`advance` move it."""

    def __init__(self, start_ns: int = 0, wall_base: float = 1_700_000_000.0):
        self._now = start_ns
        self.wall_base = wall_base

    def now_ns(self) -> int:
        return self._now

    def wall(self) -> float:
        return self.wall_base + self._now / NS_PER_S

    def advance(self, delta_ns: int) -> int:
        if delta_ns < 0:
            raise ClockRegression(f"cannot advance by {delta_ns} ns")
        self._now += delta_ns
        return self._now

    def advance_to(self, t_ns: int) -> int:
        if t_ns < self._now:
            raise ClockRegression(f"cannot move from {self._now} back to {t_ns}")
        self._now = t_ns
        return self._now


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: int, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class SimLoop:
    """Deterministic discrete-event loop over a virtual clock.

    Events due at the same instant run in scheduling order.
    """

    def __init__(self, clock: VirtualClock | None = None):
        self.clock = clock or VirtualClock()
        self._heap: list = []
        self._seq = itertools.count()
        self.events_run = 0

    def now_ns(self) -> int:
        return self.clock.now_ns()

    def call_at(self, when_ns: int, fn: Callable, *args) -> Timer:
        timer = Timer(max(when_ns, self.now_ns()), fn, args)
        heapq.heappush(self._heap, (timer.when, next(self._seq), timer))
        return timer

    def call_later(self, delay_ns: int, fn: Callable, *args) -> Timer:
        return self.call_at(self.now_ns() + max(0, int(delay_ns)), fn, *args)

    def call_soon(self, fn: Callable, *args) -> Timer:
        return self.call_at(self.now_ns(), fn, *args)

    call_soon_threadsafe = call_soon

    def pending(self) -> int:
        return sum(1 for _, _, t in self._heap if not t.cancelled)

    def next_time(self) -> int | None:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        """Run the next due event. Returns False when the queue is empty."""
        while self._heap:
            when, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.clock.advance_to(when)
            self.events_run += 1
            timer.fn(*timer.args)
            return True
        return False

    def run(self, until_ns: int | None = None, max_events: int | None = None) -> None:
        """Run until idle, or until virtual time ``until_ns`` (clock ends there)."""
        n = 0
        while True:
            nxt = self.next_time()
            if nxt is None or (until_ns is not None and nxt > until_ns):
                break
            if max_events is not None and n >= max_events:
                return
            self.step()
            n += 1
        if until_ns is not None and until_ns > self.now_ns():
            self.clock.advance_to(until_ns)

    def advance(self, delta_ns: int) -> None:
        self.run(until_ns=self.now_ns() + delta_ns)

    def run_until(self, predicate: Callable[[], bool], deadline_ns: int | None = None) -> bool:
        """Run events until ``predicate()`` holds; False if the queue drains or the deadline passes."""
        while not predicate():
            nxt = self.next_time()
            if nxt is None or (deadline_ns is not None and nxt > deadline_ns):
                return False
            self.step()
        return True


class RealLoop:
    """Callback loop on the monotonic clock, driven by one thread.

    All scheduling methods are thread-safe; callbacks always execute on the
    loop thread, which gives per-flow serialization for free.
    """

    def __init__(self, clock: MonotonicClock | None = None):
        self.clock = clock or MonotonicClock()
        self._ready: deque = deque()
        self._timers: list = []
        self._seq = itertools.count()
        self._cv = threading.Condition()
        self._stopping = False
        self._thread: threading.Thread | None = None

    def now_ns(self) -> int:
        return self.clock.now_ns()

    def call_soon(self, fn: Callable, *args) -> Timer:
        timer = Timer(0, fn, args)
        with self._cv:
            self._ready.append(timer)
            self._cv.notify()
        return timer

    call_soon_threadsafe = call_soon

    def call_later(self, delay_ns: int, fn: Callable, *args) -> Timer:
        timer = Timer(self.now_ns() + max(0, int(delay_ns)), fn, args)
        with self._cv:
            heapq.heappush(self._timers, (timer.when, next(self._seq), timer))
            self._cv.notify()
        return timer

    def call_at(self, when_ns: int, fn: Callable, *args) -> Timer:
        return self.call_later(when_ns - self.now_ns(), fn, *args)

    def in_loop_thread(self) -> bool:
        return threading.current_thread() is self._thread

    def run_forever(self) -> None:
        self._thread = threading.current_thread()
        while True:
            with self._cv:
                while True:
                    if self._stopping:
                        self._stopping = False
                        return
                    now = self.now_ns()
                    while self._timers and self._timers[0][0] <= now:
                        self._ready.append(heapq.heappop(self._timers)[2])
                    if self._ready:
                        batch = list(self._ready)
                        self._ready.clear()
                        break
                    wait = None
                    if self._timers:
                        wait = (self._timers[0][0] - now) / NS_PER_S
                    self._cv.wait(wait)
            for timer in batch:
                if timer.cancelled:
                    continue
                try:
                    timer.fn(*timer.args)
                except Exception:
                    log.exception("callback %r failed", timer.fn)

    def stop(self) -> None:
        with self._cv:
            self._stopping = True
            self._cv.notify()

    def start(self, name: str = "splicemon-loop") -> threading.Thread:
        ready = threading.Event()

        def main():
            self._thread = threading.current_thread()
            ready.set()
            self.run_forever()

        t = threading.Thread(target=main, name=name, daemon=True)
        t.start()
        ready.wait()
        return t

    def run_sync(self, fn: Callable, *args, timeout: float | None = 10.0):
        """Execute ``fn`` on the loop thread and return its result."""
        if self.in_loop_thread():
            return fn(*args)
        done = threading.Event()
        box: dict = {}

        def call():
            try:
                box["value"] = fn(*args)
            except BaseException as exc:  # re-raised in the caller
                box["error"] = exc
            finally:
                done.set()

        self.call_soon(call)
        if not done.wait(timeout):
            raise TimeoutError("loop did not run the callback in time")
        if "error" in box:
            raise box["error"]
        return box.get("value")
