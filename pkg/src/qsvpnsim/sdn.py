"""Logically centralized controller plus per-node agents.

The controller keeps the global view (nodes, link health, buffer levels,
PQC availability), computes key paths, orchestrates hub relay of end-to-end
keys, and runs the source-selection policy with flap-damping hysteresis:
falling back to the less-preferred source is immediate, returning to the
preferred one is blocked until ``hysteresis_s`` after the last switch.

Relay scheme: hop-by-hop XOR one-time pad.  The origin node draws exactly
``out_bits`` of hop key from its link with the hub, sends the wrapped key
plus the hop-key block ids; the hub unwraps with its copies, re-wraps under
the next hop's material, and the far end ingests the end-to-end key into
both stores in one commit.  Each wrapped message carries an authentication
tag keyed by the second half of the hop key.  The end-to-end key itself
never travels in the clear.

Every controller input is appended to an event log; replaying the log into
a fresh controller reproduces the identical decision sequence.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from .crypto import prf_tag, xor_bytes
from .errors import (
    AuthFailure,
    DuplicateNode,
    InsufficientKeyMaterial,
    InvalidDescriptor,
    LinkDown,
    NodeUnreachable,
    NoPathAvailable,
    RpcTimeout,
    UnknownLink,
)
from .keystore import KeyBlock, KeyStore, PairLedger, Technology, pair_key
from .qkd import LinkStatus
from .sim import Scheduler, Trigger, with_timeout
from .transport import Network


class NodeRole(str, Enum):
    HUB = "HUB"
    SPOKE = "SPOKE"


class Domain(str, Enum):
    QUANTUM_TRUST = "QUANTUM_TRUST"
    PQC_ONLY = "PQC_ONLY"


class PathKind(str, Enum):
    DIRECT_QKD = "DIRECT_QKD"
    RELAY_VIA = "RELAY_VIA"
    PQC_DIRECT = "PQC_DIRECT"


class SourceKind(str, Enum):
    QKD = "QKD"
    PQC = "PQC"


@dataclass
class NodeDescriptor:
    node_id: str
    role: NodeRole
    domain: Domain
    qkd_links: list[str] = field(default_factory=list)
    skip_address: str = ""
    agent_session: str = ""


@dataclass
class PathPlan:
    pair: tuple[str, str]
    kind: PathKind
    via: list[str] = field(default_factory=list)
    links: list[str] = field(default_factory=list)


@dataclass
class Policy:
    source_preference: list[SourceKind] = field(
        default_factory=lambda: [SourceKind.QKD, SourceKind.PQC])
    buffer_threshold_bits: int = 512
    require_ppk: bool = True
    rekey_margin_s: float = 60.0
    hysteresis_s: float = 30.0


@dataclass
class LinkView:
    link_id: str
    endpoints: tuple[str, str]
    status: LinkStatus
    buffer_bits: int = 0
    reported_at: float = -1.0


@dataclass
class SourceDecision:
    pair: tuple[str, str]
    source: SourceKind
    reason: str
    plan: PathPlan | None
    decided_at: float


@dataclass
class SwitchAction:
    pair: tuple[str, str]
    previous: SourceKind | None
    source: SourceKind
    reason: str
    at: float


class Controller:
    def __init__(self, sched: Scheduler, policy: Policy,
                 net: Network | None = None, node_id: str | None = None,
                 rng: random.Random | None = None) -> None:
        self.sched = sched
        self.policy = policy
        self.net = net
        self.node_id = node_id
        self.rng = rng or random.Random(0)
        self.nodes: dict[str, NodeDescriptor] = {}
        self.links: dict[str, LinkView] = {}
        self.pqc_available: dict[tuple[str, str], bool] = {}
        self._watched: list[tuple[str, str]] = []
        self._decisions: dict[tuple[str, str], SourceDecision] = {}
        self._last_switch: dict[tuple[str, str], float] = {}
        self.decision_log: list[SwitchAction] = []
        self.event_log: list[tuple[float, str, tuple]] = []
        self._relay_seq = 0
        self._relay_done: dict[str, Trigger] = {}
        self._agents: dict[tuple[str, str], "NodeAgent"] = {}
        if net is not None and node_id is not None:
            net.rpc_handler(node_id, "controller", self._handle_rpc)
            net.register(node_id, "controller-ev", self._handle_event)

    # -- registration and view ------------------------------------------------

    def register_node(self, desc: NodeDescriptor) -> str:
        self.event_log.append((self.sched.now, "register_node", (desc.node_id,)))
        if desc.node_id in self.nodes:
            raise DuplicateNode(f"node {desc.node_id} already registered")
        if desc.domain is Domain.PQC_ONLY and desc.qkd_links:
            raise InvalidDescriptor(
                f"node {desc.node_id}: PQC_ONLY nodes cannot carry QKD links")
        if desc.role is NodeRole.HUB and any(
                n.role is NodeRole.HUB for n in self.nodes.values()):
            raise InvalidDescriptor("topology already has a hub")
        self.nodes[desc.node_id] = desc
        return desc.node_id

    def register_link(self, link_id: str, endpoints: tuple[str, str],
                      status: LinkStatus = LinkStatus.UP) -> None:
        self.links[link_id] = LinkView(link_id, pair_key(*endpoints), status)

    def set_pqc_available(self, pair: tuple[str, str], available: bool) -> None:
        self.pqc_available[pair_key(*pair)] = available

    def report_link_state(self, link_id: str, status: LinkStatus | None,
                          buffer_bits: int, at: float | None = None) -> LinkView:
        """Fold a node report into the view; ``status=None`` is buffer-only.

        Reports older than the last accepted one are ignored (monotone
        clock); a status transition triggers an immediate policy pass.
        """
        if link_id not in self.links:
            raise UnknownLink(f"link {link_id} not registered")
        at = self.sched.now if at is None else at
        self.event_log.append((at, "report_link_state",
                               (link_id, status.value if status else None, buffer_bits)))
        view = self.links[link_id]
        if at < view.reported_at:
            return view  # stale report, monotone clock wins
        status = view.status if status is None else status
        transition = view.status is not status
        view.status = status
        view.buffer_bits = buffer_bits
        view.reported_at = at
        if transition:
            self.policy_tick(self.sched.now)
        return view

    # -- path computation -------------------------------------------------------

    def hub_id(self) -> str | None:
        for node in self.nodes.values():
            if node.role is NodeRole.HUB:
                return node.node_id
        return None

    def _direct_link(self, pair: tuple[str, str]) -> LinkView | None:
        for view in self.links.values():
            if view.endpoints == pair:
                return view
        return None

    def _link_usable(self, view: LinkView | None, threshold: int) -> bool:
        return (view is not None and view.status is LinkStatus.UP
            and view.buffer_bits >= threshold)

    def compute_key_path(self, pair: tuple[str, str],
                         policy: Policy | None = None) -> PathPlan:
        """Best plan for *pair* under the preference order.

        DIRECT_QKD if an UP link with enough buffer joins the pair; else a
        two-hop relay through the hub if both hop links qualify; else
        PQC_DIRECT when policy allows; otherwise NoPathAvailable.
        """
        policy = policy or self.policy
        pair = pair_key(*pair)
        for node in pair:
            if node not in self.nodes:
                raise NoPathAvailable(f"node {node} not registered")
        threshold = policy.buffer_threshold_bits
        for preference in policy.source_preference:
            if preference is SourceKind.QKD:
                direct = self._direct_link(pair)
                if self._link_usable(direct, threshold):
                    return PathPlan(pair, PathKind.DIRECT_QKD, links=[direct.link_id])
                hub = self.hub_id()
                if hub is not None and hub not in pair:
                    hops = [self._direct_link(pair_key(pair[0], hub)),
                            self._direct_link(pair_key(pair[1], hub))]
                    if all(self._link_usable(h, threshold) for h in hops):
                        return PathPlan(pair, PathKind.RELAY_VIA, via=[hub],
                                        links=[h.link_id for h in hops])  # type: ignore[union-attr]
            elif preference is SourceKind.PQC:
                if self.pqc_available.get(pair, True):
                    return PathPlan(pair, PathKind.PQC_DIRECT,
                                    links=[f"pqc:{pair[0]}|{pair[1]}"])
        raise NoPathAvailable(f"no usable key path for pair {pair}")

    # -- source selection + hysteresis ----------------------------------------

    def watch_pair(self, pair: tuple[str, str]) -> None:
        key = pair_key(*pair)
        if key not in self._watched:
            self._watched.append(key)

    def select_source(self, pair: tuple[str, str]) -> SourceDecision:
        """Current QKD-vs-PQC decision for the pair (evaluates and commits)."""
        self.watch_pair(pair)
        action = self._evaluate(pair_key(*pair), self.sched.now)
        decision = self._decisions[pair_key(*pair)]
        if action is not None:
            self._push_decision(decision)
        return decision

    def policy_tick(self, now: float | None = None) -> list[SwitchAction]:
        """Re-evaluate all watched pairs; emits one action per switch."""
        now = self.sched.now if now is None else now
        actions = []
        for pair in sorted(self._watched):
            action = self._evaluate(pair, now)
            if action is not None:
                actions.append(action)
                self._push_decision(self._decisions[pair])
        return actions

    def _evaluate(self, pair: tuple[str, str], now: float) -> SwitchAction | None:
        best, reason, plan = self._best_source(pair)
        current = self._decisions.get(pair)
        if current is None:
            decision = SourceDecision(pair, best, reason, plan, now)
            self._decisions[pair] = decision
            self._last_switch[pair] = now
            action = SwitchAction(pair, None, best, reason, now)
            self.decision_log.append(action)
            return action
        if best is current.source:
            current.reason = reason
            current.plan = plan
            return None
        pref = self.policy.source_preference
        upgrading = pref.index(best) < pref.index(current.source)
        if upgrading and now - self._last_switch[pair] < self.policy.hysteresis_s * 1000.0:
            return None  # hold within the hysteresis window
        previous = current.source
        self._decisions[pair] = SourceDecision(pair, best, reason, plan, now)
        self._last_switch[pair] = now
        action = SwitchAction(pair, previous, best, reason, now)
        self.decision_log.append(action)
        return action

    def _has_qkd_topology(self, pair: tuple[str, str]) -> bool:
        if self._direct_link(pair) is not None:
            return True
        hub = self.hub_id()
        if hub is None or hub in pair:
            return False
        return all(self._direct_link(pair_key(n, hub)) is not None for n in pair)

    def _best_source(self, pair: tuple[str, str]) -> tuple[SourceKind, str, PathPlan | None]:
        try:
            plan = self.compute_key_path(pair)
        except NoPathAvailable:
            # key issuance will fail loudly; the decision itself stays total
            return SourceKind.PQC, "NO_PATH", None
        if plan.kind in (PathKind.DIRECT_QKD, PathKind.RELAY_VIA):
            return SourceKind.QKD, "PREFERRED", plan
        if not self._has_qkd_topology(pair):
            return SourceKind.PQC, "NO_QKD", plan
        # QKD exists in the topology but was passed over: name why
        links = [self._direct_link(pair)]
        hub = self.hub_id()
        if hub is not None and hub not in pair:
            links += [self._direct_link(pair_key(pair[0], hub)),
                      self._direct_link(pair_key(pair[1], hub))]
        views = [v for v in links if v is not None]
        if any(v.status is not LinkStatus.UP for v in views):
            return SourceKind.PQC, "LINK_DOWN", plan
        if any(v.buffer_bits < self.policy.buffer_threshold_bits for v in views):
            return SourceKind.PQC, "BUFFER_LOW", plan
        return SourceKind.PQC, "PREFERENCE", plan

    def _push_decision(self, decision: SourceDecision) -> None:
        for node in decision.pair:
            agent = self._agents.get((node, "agent"))
            if agent is not None:
                agent.receive_decision(decision)
            elif self.net is not None and self.node_id is not None:
                try:
                    self.net.send(self.node_id, node, "agent", {
                        "type": "decision", "pair": list(decision.pair),
                        "source": decision.source.value, "reason": decision.reason,
                        "kind": decision.plan.kind.value if decision.plan else None,
                        "links": decision.plan.links if decision.plan else [],
                        "via": decision.plan.via if decision.plan else [],
                    })
                except LinkDown:
                    pass

    def attach_agent(self, agent: "NodeAgent") -> None:
        self._agents[(agent.node_id, "agent")] = agent

    # -- relay ------------------------------------------------------------------

    def relay_key(self, plan: PathPlan, out_bits: int):
        """Generator: deliver a fresh end-to-end key along a hub relay plan."""
        if plan.kind is not PathKind.RELAY_VIA:
            raise NoPathAvailable(f"relay requested for non-relay plan {plan.kind}")
        for link_id in plan.links:
            view = self.links.get(link_id)
            if view is None:
                raise UnknownLink(f"relay hop link {link_id} unknown")
            if view.status is not LinkStatus.UP:
                raise InsufficientKeyMaterial(f"hop {link_id}: link is {view.status.value}")
        for link_id in plan.links:
            view = self.links[link_id]
            if view.reported_at >= 0 and view.buffer_bits < out_bits:
                raise InsufficientKeyMaterial(
                    f"hop {link_id}: {view.buffer_bits} bits buffered, need {out_bits}")
        self._relay_seq += 1
        relay_id = f"relay-{self._relay_seq:08d}"
        a, b = plan.pair
        hub = plan.via[0]
        path = [a, hub, b]
        done = Trigger(self.sched)
        self._relay_done[relay_id] = done
        key_id = f"e2e-{relay_id}"
        try:
            yield from self.net.rpc(self.node_id, a, "agent-relay", {
                "type": "relay_start", "relay_id": relay_id, "path": path,
                "links": plan.links, "out_bits": out_bits, "key_id": key_id,
                "pair": [a, b],
            })
            ok, result = yield from self._await_done(done)
        except RpcTimeout as exc:
            raise NodeUnreachable(f"relay origin {a} unreachable: {exc}") from exc
        finally:
            self._relay_done.pop(relay_id, None)
        if not ok:
            raise NodeUnreachable(f"relay {relay_id}: no completion within timeout")
        return result  # key_id of the ingested end-to-end block

    def _await_done(self, done: Trigger, timeout_ms: float = 10_000.0):
        result = yield with_timeout(self.sched, done, timeout_ms)
        return result

    def relay_completed(self, relay_id: str, key_id: str) -> None:
        trig = self._relay_done.get(relay_id)
        if trig is not None:
            trig.fire(key_id)

    def relay_failed(self, relay_id: str, error: Exception) -> None:
        trig = self._relay_done.get(relay_id)
        if trig is not None:
            trig.fail(error)

    # -- rpc plumbing ---------------------------------------------------------

    def _handle_rpc(self, body: dict, src: str):
        kind = body.get("type")
        if kind == "register_node":
            desc = NodeDescriptor(
                node_id=body["node_id"], role=NodeRole(body["role"]),
                domain=Domain(body["domain"]), qkd_links=body.get("qkd_links", []),
                skip_address=body.get("skip_address", ""),
                agent_session=body.get("agent_session", ""))
            return {"node_id": self.register_node(desc)}
        if kind == "path_request":
            pair = pair_key(*body["pair"])
            decision = self.select_source(pair)
            if decision.source is SourceKind.QKD and decision.plan is not None \
                    and decision.plan.kind is PathKind.RELAY_VIA:
                key_id = yield from self.relay_key(decision.plan, body["out_bits"])
                return {"source": decision.source.value, "kind": decision.plan.kind.value,
                        "key_id": key_id, "reason": decision.reason}
            plan = decision.plan
            return {"source": decision.source.value,
                    "kind": plan.kind.value if plan else None,
                    "links": plan.links if plan else [], "reason": decision.reason}
        if kind == "sync_forward":
            # out-of-band ppk_id propagation rides the agent channel
            dest = body["dest"]
            self.net.send(self.node_id, dest, "skip-sync", body["record"])
            return {"forwarded": True}
        raise UnknownLink(f"controller: unknown rpc {kind!r}")

    def _handle_event(self, body: dict, src: str) -> None:
        kind = body.get("type")
        if kind == "link_report":
            status = LinkStatus(body["status"]) if body.get("status") else None
            self.report_link_state(body["link_id"], status,
                                   body["buffer_bits"], body.get("at"))
        elif kind == "relay_done":
            self.relay_completed(body["relay_id"], body["key_id"])
        elif kind == "relay_failed":
            self.relay_failed(body["relay_id"],
                              InsufficientKeyMaterial(body["message"]))


class NodeAgent:
    """Per-node control element: reports state, caches decisions, relays."""

    def __init__(self, node_id: str, controller_node: str, net: Network,
                 sched: Scheduler, store: KeyStore, rng: random.Random) -> None:
        self.node_id = node_id
        self.controller_node = controller_node
        self.net = net
        self.sched = sched
        self.store = store
        self.rng = rng
        self.decisions: dict[tuple[str, str], dict] = {}
        self.skip_sync_sink = None  # set by the SKIP service
        net.register(node_id, "agent", self._on_message)
        net.rpc_handler(node_id, "agent-relay", self._on_relay)
        net.register(node_id, "skip-sync", self._on_skip_sync)

    # -- controller-facing ------------------------------------------------------

    def report_link(self, link_id: str, status: LinkStatus | None,
                    buffer_bits: int) -> None:
        try:
            self.net.send(self.node_id, self.controller_node, "controller-ev", {
                "type": "link_report", "link_id": link_id,
                "status": status.value if status else None,
                "buffer_bits": buffer_bits, "at": self.sched.now,
            })
        except LinkDown:
            pass

    def receive_decision(self, decision: SourceDecision) -> None:
        self.decisions[decision.pair] = {
            "source": decision.source.value, "reason": decision.reason,
            "kind": decision.plan.kind.value if decision.plan else None,
            "links": decision.plan.links if decision.plan else [],
            "via": decision.plan.via if decision.plan else [],
        }

    def cached_decision(self, pair: tuple[str, str]) -> dict | None:
        return self.decisions.get(pair_key(*pair))

    def _on_message(self, body: dict, src: str) -> None:
        if body.get("type") == "decision":
            pair = pair_key(*body["pair"])
            self.decisions[pair] = {
                "source": body["source"], "reason": body["reason"],
                "kind": body.get("kind"), "links": body.get("links", []),
                "via": body.get("via", []),
            }

    def _on_skip_sync(self, body: dict, src: str) -> None:
        if self.skip_sync_sink is not None:
            self.skip_sync_sink(body)

    # -- relay participation ----------------------------------------------

    def _on_relay(self, body: dict, src: str):
        if body["type"] == "relay_start":
            return self._relay_start(body)
        raise InsufficientKeyMaterial(f"agent: unknown relay op {body['type']!r}")

    def _relay_start(self, body: dict) -> dict:
        """Origin hop: wrap a freshly drawn key under hop-1 material."""
        out_bits = body["out_bits"]
        end_key = self.rng.getrandbits(out_bits).to_bytes(out_bits // 8, "big")
        link_id = body["links"][0]
        hop_key, block_ids = self.store.draw_consumed(link_id, out_bits)
        wrapped = xor_bytes(end_key, hop_key)
        tag = prf_tag(hop_key[len(hop_key) // 2:], "relay-hop", body["relay_id"], wrapped)
        hub = body["path"][1]
        self.net.send(self.node_id, hub, "relay-hop", {
            "relay_id": body["relay_id"], "path": body["path"], "links": body["links"],
            "hop_index": 1, "key_id": body["key_id"], "pair": body["pair"],
            "out_bits": out_bits, "wrapped": wrapped.hex(), "block_ids": block_ids,
            "tag": tag.hex(),
        })
        return {"started": True}


class RelayParticipant:
    """Hop handlers shared by hub and terminal nodes of a relay path."""

    def __init__(self, node_id: str, controller_node: str, net: Network,
                 sched: Scheduler, store: KeyStore,
                 ledgers: dict[tuple[str, str], PairLedger],
                 relay_sources: dict[tuple[str, str], str],
                 key_lifetime_ms: float) -> None:
        self.node_id = node_id
        self.controller_node = controller_node
        self.net = net
        self.sched = sched
        self.store = store
        self.ledgers = ledgers
        self.relay_sources = relay_sources
        self.key_lifetime_ms = key_lifetime_ms
        net.register(node_id, "relay-hop", self._on_hop)

    def _on_hop(self, body: dict, src: str) -> None:
        try:
            self._handle_hop(body)
        except Exception as exc:  # report failure to the controller
            self.net.send(self.node_id, self.controller_node, "controller-ev", {
                "type": "relay_failed", "relay_id": body["relay_id"],
                "message": f"{type(exc).__name__}: {exc}",
            })

    def _handle_hop(self, body: dict) -> None:
        hop_key = self.store.consume_blocks(body["block_ids"])
        wrapped = bytes.fromhex(body["wrapped"])
        expected = prf_tag(hop_key[len(hop_key) // 2:], "relay-hop",
                           body["relay_id"], wrapped)
        if bytes.fromhex(body["tag"]) != expected:
            raise AuthFailure(f"relay {body['relay_id']}: bad hop tag at {self.node_id}")
        end_key = xor_bytes(wrapped, hop_key)
        path = body["path"]
        position = path.index(self.node_id)
        if position < len(path) - 1:
            # intermediate trusted node: re-wrap under the next hop's material
            next_link = body["links"][body["hop_index"]]
            next_hop_key, block_ids = self.store.draw_consumed(next_link, body["out_bits"])
            rewrapped = xor_bytes(end_key, next_hop_key)
            tag = prf_tag(next_hop_key[len(next_hop_key) // 2:], "relay-hop",
                          body["relay_id"], rewrapped)
            self.net.send(self.node_id, path[position + 1], "relay-hop", {
                **body, "hop_index": body["hop_index"] + 1,
                "wrapped": rewrapped.hex(), "block_ids": block_ids, "tag": tag.hex(),
            })
            return
        # terminal node: commit the end-to-end key into both endpoint stores
        pair = pair_key(*body["pair"])
        block = KeyBlock(
            key_id=body["key_id"], key_bytes=end_key,
            origin=self.relay_sources[pair], technology=Technology.RELAYED,
            created_at=self.sched.now, expires_at=self.sched.now + self.key_lifetime_ms,
        )
        self.ledgers[pair].ingest_synced(block)
        self.net.send(self.node_id, self.controller_node, "controller-ev", {
            "type": "relay_done", "relay_id": body["relay_id"], "key_id": body["key_id"],
        })
