"""Transport: exact delays, loss, capture, RPC error propagation."""

import random

import pytest

from qsvpnsim.errors import LinkDown, RpcTimeout, UnknownPeer
from qsvpnsim.sim import Scheduler
from qsvpnsim.transport import Network, TransportLink


def make_net(delay=87.5, jitter=0.0, loss=0.0, seed=7):
    sched = Scheduler()
    net = Network(sched, random.Random(seed))
    net.add_link(TransportLink(("a", "b"), one_way_delay_ms=delay,
                               jitter_ms=jitter, loss_rate=loss))
    net.attach_rpc_replies("a")
    net.attach_rpc_replies("b")
    return sched, net


def test_delivery_at_exact_one_way_delay():
    sched, net = make_net(delay=87.5)
    arrivals = []
    net.register("b", "svc", lambda body, src: arrivals.append(sched.now))
    net.send("a", "b", "svc", {"x": 1})
    sched.run()
    assert arrivals == [87.5]


def test_full_loss_never_delivers_but_captures():
    sched, net = make_net(loss=1.0)
    net.register("b", "svc", lambda body, src: pytest.fail("delivered"))
    net.send("a", "b", "svc", {})
    sched.run()
    assert net.capture[0].dropped is True


def test_same_seed_identical_delivery_schedule():
    def run(seed):
        sched, net = make_net(jitter=5.0, seed=seed)
        times = []
        net.register("b", "svc", lambda body, src: times.append(sched.now))
        for _ in range(50):
            net.send("a", "b", "svc", {})
        sched.run()
        return times

    assert run(3) == run(3)
    assert run(3) != run(4)


def test_send_on_down_link_raises():
    sched, net = make_net()
    net.set_link_up("a", "b", False)
    with pytest.raises(LinkDown):
        net.send("a", "b", "svc", {})


def test_rpc_roundtrip_and_value():
    sched, net = make_net(delay=10.0)
    net.rpc_handler("b", "svc", lambda body, src: {"doubled": body["n"] * 2})
    out = []

    def caller():
        reply = yield from net.rpc("a", "b", "svc", {"n": 21})
        out.append((sched.now, reply["doubled"]))

    sched.spawn(caller())
    sched.run()
    assert out == [(20.0, 42)]


def test_rpc_generator_handler_with_delay():
    sched, net = make_net(delay=5.0)

    def handler(body, src):
        yield 30.0
        return {"ok": True}

    net.rpc_handler("b", "svc", handler)
    out = []

    def caller():
        reply = yield from net.rpc("a", "b", "svc", {})
        out.append(sched.now)

    sched.spawn(caller())
    sched.run()
    assert out == [40.0]


def test_rpc_remote_error_reraised_by_type():
    sched, net = make_net()

    def handler(body, src):
        raise UnknownPeer("nope")

    net.rpc_handler("b", "svc", handler)
    caught = []

    def caller():
        try:
            yield from net.rpc("a", "b", "svc", {})
        except UnknownPeer as exc:
            caught.append(str(exc))

    sched.spawn(caller())
    sched.run()
    assert caught == ["nope"]


def test_rpc_timeout_on_lost_request():
    sched, net = make_net(loss=1.0)
    caught = []

    def caller():
        try:
            yield from net.rpc("a", "b", "svc", {}, timeout_ms=100.0)
        except RpcTimeout:
            caught.append(sched.now)

    sched.spawn(caller())
    sched.run(until=1000.0)
    assert caught == [100.0]


def test_local_delivery_zero_delay():
    sched, net = make_net()
    times = []
    net.register("a", "svc", lambda body, src: times.append(sched.now))
    net.send("a", "a", "svc", {})
    sched.run()
    assert times == [0.0]
