"""Event kernel: ordering, processes, triggers, timeouts, panics."""

import pytest

from qsvpnsim.errors import ScenarioPanic
from qsvpnsim.sim import Scheduler, Trigger, with_timeout


def test_events_execute_in_time_then_fifo_order():
    sched = Scheduler()
    seen = []
    sched.call_at(5.0, seen.append, "b")
    sched.call_at(1.0, seen.append, "a")
    sched.call_at(5.0, seen.append, "c")
    sched.run()
    assert seen == ["a", "b", "c"]


def test_clock_is_monotone_and_settles_at_until():
    sched = Scheduler()
    sched.call_at(10.0, lambda: None)
    sched.run(until=50.0)
    assert sched.now == 50.0


def test_scheduling_in_the_past_panics():
    sched = Scheduler()
    sched.call_at(10.0, lambda: sched.call_at(5.0, lambda: None))
    with pytest.raises(ScenarioPanic):
        sched.run()


def test_process_sleep_and_return_value():
    sched = Scheduler()

    def worker():
        yield 10.0
        yield 5.0
        return sched.now

    proc = sched.spawn(worker())
    sched.run()
    assert proc.done and proc.result == 15.0


def test_process_join_receives_result():
    sched = Scheduler()
    results = []

    def child():
        yield 3.0
        return "payload"

    def parent():
        value = yield sched.spawn(child())
        results.append((sched.now, value))

    sched.spawn(parent())
    sched.run()
    assert results == [(3.0, "payload")]


def test_trigger_fire_resumes_waiter_with_value():
    sched = Scheduler()
    trig = Trigger(sched)
    got = []

    def waiter():
        value = yield trig
        got.append(value)

    sched.spawn(waiter())
    sched.call_at(7.0, trig.fire, 42)
    sched.run()
    assert got == [42]


def test_trigger_failure_raises_in_waiter():
    sched = Scheduler()
    trig = Trigger(sched)
    caught = []

    def waiter():
        try:
            yield trig
        except ValueError as exc:
            caught.append(str(exc))

    sched.spawn(waiter())
    sched.call_at(1.0, trig.fail, ValueError("boom"))
    sched.run()
    assert caught == ["boom"]


def test_unjoined_process_failure_panics_the_run():
    sched = Scheduler()

    def broken():
        yield 1.0
        raise RuntimeError("invariant breach")

    sched.spawn(broken())
    with pytest.raises(ScenarioPanic, match="invariant breach"):
        sched.run()


def test_with_timeout_value_and_deadline():
    sched = Scheduler()
    outcomes = []

    def fast():
        trig = Trigger(sched)
        sched.call_at(3.0, trig.fire, "hi")
        outcomes.append((yield with_timeout(sched, trig, 10.0)))

    def slow():
        trig = Trigger(sched)
        sched.call_at(100.0, trig.fire, "late")
        outcomes.append((yield with_timeout(sched, trig, 10.0)))

    sched.spawn(fast())
    sched.spawn(slow())
    sched.run(until=200.0)
    assert (True, "hi") in outcomes and (False, None) in outcomes


def test_run_until_complete_stops_early():
    sched = Scheduler()
    sched.call_at(1000.0, lambda: None)

    def quick():
        yield 5.0
        return "done"

    proc = sched.spawn(quick())
    sched.run_until_complete(proc, limit=2000.0)
    assert proc.done and sched.now == 5.0


def test_determinism_same_schedule_same_trace():
    def build():
        sched = Scheduler()
        trace = []

        def proc(name, period):
            for _ in range(5):
                yield period
                trace.append((sched.now, name))

        sched.spawn(proc("x", 3.0))
        sched.spawn(proc("y", 3.0))
        sched.run()
        return trace

    assert build() == build()
