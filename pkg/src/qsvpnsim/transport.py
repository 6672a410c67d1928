"""Message transport between simulated nodes.

Point-to-point links carry structured dict messages with a configurable
one-way delay, uniform jitter and loss probability.  Every send is recorded
in the wire capture (used by the relay-secrecy checks), including drops.

On top of raw sends the network offers an RPC pattern: handlers may return a
value directly or a generator (run as a process); registered errors raised by
a handler are serialized and re-raised at the caller.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable

from .errors import LinkDown, QsVpnError, RpcTimeout, ScenarioPanic, rebuild_error
from .sim import Process, Scheduler, Trigger, with_timeout


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class TransportLink:
    pair: tuple[str, str]
    one_way_delay_ms: float
    jitter_ms: float = 0.0
    loss_rate: float = 0.0
    up: bool = True


@dataclass
class WireRecord:
    sent_at: float
    deliver_at: float
    src: str
    dst: str
    service: str
    body: dict
    dropped: bool = False


@dataclass
class _Pending:
    trigger: Trigger


class Network:
    """Star-free any-to-any message fabric over configured links."""

    def __init__(
        self,
        sched: Scheduler,
        rng: random.Random,
        capture: bool = True,
        local_delay_ms: float = 0.0,
        default_rpc_timeout_ms: float = 30_000.0,
    ) -> None:
        self.sched = sched
        self.rng = rng
        self.local_delay_ms = local_delay_ms
        self.default_rpc_timeout_ms = default_rpc_timeout_ms
        self._links: dict[tuple[str, str], TransportLink] = {}
        self._handlers: dict[tuple[str, str], Callable] = {}
        self._pending: dict[int, _Pending] = {}
        self._rpc_ids = itertools.count(1)
        self.capture: list[WireRecord] | None = [] if capture else None

    # -- wiring ------------------------------------------------------------

    def add_link(self, link: TransportLink) -> None:
        self._links[pair_key(*link.pair)] = link

    def link(self, a: str, b: str) -> TransportLink:
        key = pair_key(a, b)
        if key not in self._links:
            raise LinkDown(f"no transport link between {a} and {b}")
        return self._links[key]

    def set_link_up(self, a: str, b: str, up: bool) -> None:
        self.link(a, b).up = up

    def register(self, node: str, service: str, handler: Callable[[dict, str], Any]) -> None:
        self._handlers[(node, service)] = handler

    # -- one-way send --------------------------------------------------------

    def send(self, src: str, dst: str, service: str, body: dict) -> None:
        """Schedule delivery of *body*; raises LinkDown if the link is down."""
        if src == dst:
            delay = self.local_delay_ms
            dropped = False
        else:
            link = self.link(src, dst)
            if not link.up:
                raise LinkDown(f"transport {src}<->{dst} is down")
            delay = link.one_way_delay_ms
            if link.jitter_ms:
                delay = max(0.0, delay + self.rng.uniform(-link.jitter_ms, link.jitter_ms))
            dropped = link.loss_rate > 0 and self.rng.random() < link.loss_rate
        deliver_at = self.sched.now + delay
        if self.capture is not None:
            self.capture.append(
                WireRecord(self.sched.now, deliver_at, src, dst, service, body, dropped)
            )
        if dropped:
            return
        self.sched.call_at(deliver_at, self._deliver, src, dst, service, body)

    def _deliver(self, src: str, dst: str, service: str, body: dict) -> None:
        handler = self._handlers.get((dst, service))
        if handler is None:
            raise ScenarioPanic(f"no handler for service {service!r} at node {dst!r}")
        handler(body, src)

    # -- request/response ----------------------------------------------------

    def rpc(self, src: str, dst: str, service: str, body: dict,
            timeout_ms: float | None = None):
        """Generator: send a request and wait for the reply (or RpcTimeout)."""
        rpc_id = next(self._rpc_ids)
        trig = Trigger(self.sched)
        self._pending[rpc_id] = _Pending(trig)
        envelope = {"_rpc": rpc_id, "_reply_to": src, "_body": body}
        self.send(src, dst, service, envelope)
        timeout = self.default_rpc_timeout_ms if timeout_ms is None else timeout_ms
        ok, value = yield with_timeout(self.sched, trig, timeout)
        if not ok:
            self._pending.pop(rpc_id, None)
            raise RpcTimeout(f"rpc to {dst}/{service} timed out after {timeout} ms")
        return value

    def rpc_handler(self, node: str, service: str,
                    handler: Callable[[dict, str], Any]) -> None:
        """Register *handler* for RPC envelopes on (node, service).

        The handler receives the request body and the source node.  It may
        return a plain value or a generator; QsVpnError raised inside is
        shipped back to the caller and re-raised there.
        """

        def dispatch(envelope: dict, src: str) -> None:
            rpc_id = envelope["_rpc"]
            reply_to = envelope["_reply_to"]

            def reply_ok(value: Any) -> None:
                self._reply(node, reply_to, {"_rpc_re": rpc_id, "ok": True, "value": value})

            def reply_err(exc: QsVpnError) -> None:
                self._reply(node, reply_to, {
                    "_rpc_re": rpc_id, "ok": False,
                    "error": type(exc).__name__, "message": str(exc),
                })

            try:
                result = handler(envelope["_body"], src)
            except QsVpnError as exc:
                reply_err(exc)
                return
            if hasattr(result, "send") and hasattr(result, "throw"):
                # QsVpnError is replied to the caller inside _run_handler;
                # anything else becomes an orphan failure and aborts the run.
                self.sched.spawn(self._run_handler(result, reply_ok, reply_err))
            else:
                reply_ok(result)

        self.register(node, service, dispatch)

    def _run_handler(self, gen, reply_ok, reply_err):
        try:
            value = yield self.sched.spawn(gen)
        except QsVpnError as exc:
            reply_err(exc)
            return
        reply_ok(value)

    def _reply(self, src: str, dst: str, payload: dict) -> None:
        try:
            self.send(src, dst, "_rpc_reply", payload)
        except LinkDown:
            pass  # caller's timeout handles a severed return path

    def attach_rpc_replies(self, node: str) -> None:
        """Every node that issues RPCs needs its reply sink registered once."""

        def on_reply(payload: dict, _src: str) -> None:
            pending = self._pending.pop(payload["_rpc_re"], None)
            if pending is None:
                return  # reply after timeout: drop
            if payload["ok"]:
                pending.trigger.fire(payload["value"])
            else:
                pending.trigger.fail(rebuild_error(payload["error"], payload["message"]))

        self.register(node, "_rpc_reply", on_reply)
