"""Deterministic discrete-event kernel.

Single-threaded simulated-time scheduler with generator-based processes.
Events execute in ``(time, sequence)`` order; the sequence number is a global
monotone counter, so two runs that schedule the same work in the same order
are byte-for-byte identical.  Processes are plain generators that yield:

* a number       -- sleep that many simulated milliseconds,
* a ``Trigger``  -- park until someone fires (or fails) it,
* a ``Process``  -- join another process, receiving its return value.

A process that raises and is never joined counts as an orphan failure and
aborts the run with :class:`ScenarioPanic`, so broken invariants surface
instead of vanishing inside a callback.
"""

from __future__ import annotations

import heapq
import itertools
import traceback
from typing import Any, Callable, Generator, Iterator

from .errors import ScenarioPanic

ProcessGen = Generator[Any, Any, Any]


class Scheduler:
    def __init__(self) -> None:
        self._now = 0.0
        self._heap: list[tuple[float, int, Callable, tuple]] = []
        self._seq: Iterator[int] = itertools.count()
        self._orphan: list[BaseException] = []
        self._events_run = 0

    @property
    def now(self) -> float:
        return self._now

    @property
    def events_run(self) -> int:
        return self._events_run

    def call_at(self, at: float, fn: Callable, *args: Any) -> None:
        if at < self._now - 1e-9:
            raise ScenarioPanic(f"causality violation: scheduling at {at} before now={self._now}")
        heapq.heappush(self._heap, (max(at, self._now), next(self._seq), fn, args))

    def call_later(self, delay: float, fn: Callable, *args: Any) -> None:
        if delay < 0:
            raise ScenarioPanic(f"negative delay {delay}")
        self.call_at(self._now + delay, fn, *args)

    def spawn(self, gen: ProcessGen) -> "Process":
        return Process(self, gen)

    def trigger(self) -> "Trigger":
        return Trigger(self)

    def _step_one(self) -> None:
        at, _, fn, args = heapq.heappop(self._heap)
        if at < self._now - 1e-9:
            raise ScenarioPanic("clock went backwards")
        self._now = at
        self._events_run += 1
        fn(*args)
        if self._orphan:
            exc = self._orphan[0]
            detail = "".join(traceback.format_exception(exc))
            raise ScenarioPanic(
                f"unhandled process failure at t={self._now}:\n{detail}") from exc

    def run(self, until: float | None = None) -> None:
        """Execute events until the queue drains or simulated *until* is reached."""
        while self._heap:
            if until is not None and self._heap[0][0] > until + 1e-12:
                break
            self._step_one()
        if until is not None and until > self._now:
            self._now = until

    def run_until_complete(self, process: "Process", limit: float | None = None) -> None:
        """Execute events until *process* finishes (or the limit is hit)."""
        while not process.done and self._heap:
            if limit is not None and self._heap[0][0] > limit + 1e-12:
                break
            self._step_one()


class Trigger:
    """One-shot waitable event. Fire with a value, or fail with an exception."""

    __slots__ = ("_sched", "fired", "value", "error", "_waiters")

    def __init__(self, sched: Scheduler) -> None:
        self._sched = sched
        self.fired = False
        self.value: Any = None
        self.error: BaseException | None = None
        self._waiters: list[Callable[[], None]] = []

    def fire(self, value: Any = None) -> None:
        if self.fired:
            return
        self.fired = True
        self.value = value
        self._dispatch()

    def fail(self, error: BaseException) -> None:
        if self.fired:
            return
        self.fired = True
        self.error = error
        self._dispatch()

    def _dispatch(self) -> None:
        waiters, self._waiters = self._waiters, []
        for cb in waiters:
            self._sched.call_at(self._sched.now, cb)

    def add_waiter(self, cb: Callable[[], None]) -> None:
        if self.fired:
            self._sched.call_at(self._sched.now, cb)
        else:
            self._waiters.append(cb)


class Process:
    """A running generator; completed value in ``result``, failure in ``error``."""

    __slots__ = ("_sched", "_gen", "done", "result", "error", "_done_trigger", "_joined")

    def __init__(self, sched: Scheduler, gen: ProcessGen) -> None:
        self._sched = sched
        self._gen = gen
        self.done = False
        self.result: Any = None
        self.error: BaseException | None = None
        self._done_trigger = Trigger(sched)
        self._joined = False
        sched.call_at(sched.now, self._step, None, None)

    def _step(self, send_value: Any, throw_exc: BaseException | None) -> None:
        try:
            if throw_exc is not None:
                item = self._gen.throw(throw_exc)
            else:
                item = self._gen.send(send_value)
        except StopIteration as stop:
            self.done = True
            self.result = stop.value
            self._done_trigger.fire(stop.value)
            return
        except BaseException as exc:  # noqa: BLE001 - must not lose sim failures
            self.done = True
            self.error = exc
            if self._joined or self._done_trigger._waiters:
                self._done_trigger.fail(exc)
            else:
                self._sched._orphan.append(exc)
            return
        self._wait_on(item)

    def _wait_on(self, item: Any) -> None:
        if isinstance(item, (int, float)):
            if item < 0:
                self._step(None, ScenarioPanic(f"process slept for negative time {item}"))
                return
            self._sched.call_at(self._sched.now + item, self._step, None, None)
        elif isinstance(item, Trigger):
            item.add_waiter(lambda: self._resume_from_trigger(item))
        elif isinstance(item, Process):
            item._joined = True
            if item.done and item.error is not None:
                # error already queued as orphan; reclaim it for this joiner
                if item.error in self._sched._orphan:
                    self._sched._orphan.remove(item.error)
                self._sched.call_at(self._sched.now, self._step, None, item.error)
            else:
                item._done_trigger.add_waiter(lambda: self._resume_from_trigger(item._done_trigger))
        else:
            self._step(None, ScenarioPanic(f"process yielded unsupported item {item!r}"))

    def _resume_from_trigger(self, trig: Trigger) -> None:
        if trig.error is not None:
            self._step(None, trig.error)
        else:
            self._step(trig.value, None)

    def join(self) -> ProcessGen:
        """Wait for completion from another process: ``value = yield proc.join()``."""
        result = yield self
        return result


def with_timeout(sched: Scheduler, trigger: Trigger, timeout_ms: float) -> Trigger:
    """Race *trigger* against a deadline.

    The returned trigger fires with ``(True, value)`` when the inner trigger
    fires in time, or ``(False, None)`` at the deadline.  Inner failures
    propagate as failures.
    """
    out = Trigger(sched)

    def on_inner() -> None:
        if trigger.error is not None:
            out.fail(trigger.error)
        else:
            out.fire((True, trigger.value))

    trigger.add_waiter(on_inner)
    sched.call_later(timeout_ms, lambda: out.fire((False, None)))
    return out
