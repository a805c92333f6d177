"""Clock abstraction so scrape and analyzer loops run on real or simulated time.

``SystemClock`` is wall time. ``ManualClock`` is a deterministic scheduler
for tests and replays: worker threads register as tasks and park in
``wait_until``; ``advance`` moves time to each due deadline in order,
wakes the sleepers, and waits for every woken task to finish its work and
park again before moving further. Time therefore never races ahead of the
work scheduled before it.
"""
from __future__ import annotations

import threading
import time


class SystemClock:
    """Wall-clock time in integer milliseconds."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def wait_until(self, deadline_ms: int, stop: threading.Event) -> None:
        """Sleep until the deadline or until ``stop`` is set."""
        while not stop.is_set():
            remaining = (deadline_ms - self.now_ms()) / 1000.0
            if remaining <= 0:
                return
            stop.wait(min(remaining, 0.5))

    def kick(self) -> None:
        pass

    def task_started(self) -> None:
        pass

    def task_finished(self) -> None:
        pass


class _Sleeper:
    __slots__ = ("deadline",)

    def __init__(self, deadline: int):
        self.deadline = deadline


class ManualClock:
    """Deterministic time source driven by explicit ``advance`` calls.

    Threads doing clock-driven work must bracket their lifetime with
    ``task_started``/``task_finished`` (or run under :func:`clock_task`);
    between waits a task counts as busy and ``advance`` will not move time
    past it.
    """

    def __init__(self, start_ms: int = 0):
        self._now = int(start_ms)
        self._cond = threading.Condition()
        self._sleepers: set[_Sleeper] = set()
        self._busy = 0

    def now_ms(self) -> int:
        with self._cond:
            return self._now

    def task_started(self) -> None:
        with self._cond:
            self._busy += 1
            self._cond.notify_all()

    def task_finished(self) -> None:
        with self._cond:
            self._busy -= 1
            self._cond.notify_all()

    def kick(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def wait_until(self, deadline_ms: int, stop: threading.Event) -> None:
        entry = _Sleeper(deadline_ms)
        with self._cond:
            self._sleepers.add(entry)
            self._busy -= 1
            self._cond.notify_all()
            try:
                while self._now < deadline_ms and not stop.is_set():
                    self._cond.wait()
            finally:
                self._sleepers.discard(entry)
                self._busy += 1
                self._cond.notify_all()

    def advance(self, delta_ms: int, quiesce_timeout_s: float = 30.0) -> None:
        """Move time forward, firing every deadline in order.

        Returns once the target time is reached and all woken tasks have
        parked again. Raises ``RuntimeError`` if tasks fail to quiesce.
        """
        deadline = time.monotonic() + quiesce_timeout_s

        def wait_for(predicate) -> None:
            while not predicate():
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise RuntimeError("ManualClock.advance: tasks failed to quiesce")
                self._cond.wait(min(remaining, 1.0))

        with self._cond:
            target = self._now + int(delta_ms)
            while True:
                wait_for(lambda: self._busy == 0)
                due = [s.deadline for s in self._sleepers if s.deadline <= target]
                if not due:
                    self._now = target
                    self._cond.notify_all()
                    return
                self._now = min(due)
                self._cond.notify_all()
                # wait until every sleeper due at the new time has woken up
                wait_for(
                    lambda: not any(s.deadline <= self._now for s in self._sleepers)
                )


class clock_task:
    """Context manager marking the current thread as a clock-driven task."""

    def __init__(self, clock):
        self.clock = clock

    def __enter__(self):
        self.clock.task_started()
        return self

    def __exit__(self, *exc):
        self.clock.task_finished()
        return False
