"""Key-source service embedded at each trusted node, plus the router client.

The service answers three operations over a preshared-credential channel
standing in for the PSK-protected HTTPS transport (the device-to-source hop
is local to the trusted perimeter):

* ``get_capabilities`` -- local and peer key-source identities, supported
  preshared-key lengths, and the technologies currently available;
* ``get_key`` -- issue a fresh PPK toward a peer, sourced per the current
  controller decision (direct QKD buffer, hub relay, or the PQC pool) and
  synchronized so the peer source can serve the same id;
* ``get_key_by_id`` -- the responder-side fetch.  If the out-of-band id
  announcement has not arrived yet the fetch blocks until it does (or a
  2 s timeout expires).

Wire schema (version 1): request ``{op, peer, ppk_len, ppk_id}``, response
``{status, ...}``.  Status codes: OK, AUTH_FAILURE, UNKNOWN_PEER,
NO_KEY_AVAILABLE, UNKNOWN_PPK_ID, KEY_ALREADY_CONSUMED, BAD_LENGTH.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .crypto import prf_tag
from .errors import (
    AuthFailure,
    BadLength,
    InsufficientKeyMaterial,
    KeyAlreadyConsumed,
    NoKeyAvailable,
    NoPathAvailable,
    QsVpnError,
    RpcTimeout,
    UnknownPeer,
    UnknownPpkId,
)
from .keystore import KeyStore, PpkRecord, Technology, pair_key
from .sdn import NodeAgent, SourceKind
from .sim import Scheduler, Trigger, with_timeout
from .transport import Network

SYNC_TIMEOUT_MS = 2000.0
STATUS_CODES = {
    "OK": "OK",
    AuthFailure: "AUTH_FAILURE",
    UnknownPeer: "UNKNOWN_PEER",
    NoKeyAvailable: "NO_KEY_AVAILABLE",
    UnknownPpkId: "UNKNOWN_PPK_ID",
    KeyAlreadyConsumed: "KEY_ALREADY_CONSUMED",
    BadLength: "BAD_LENGTH",
}


@dataclass
class SkipCapabilities:
    local_identity: str
    peer_identities: list[str]
    supported_ppk_lengths: list[int]
    technologies: list[str]


@dataclass
class SkipChannel:
    client_id: str
    psk_id: str
    state: str  # AUTHENTICATED | REJECTED


@dataclass
class CalibrationDelays:
    ecdh_compute_ms: float = 10.0
    kms_processing_ms: float = 260.0
    skip_local_call_ms: float = 20.0


@dataclass
class SyncEvent:
    ppk_id: str
    arrived_at: float
    record: dict


class SkipService:
    """One key-source service per trusted node."""

    def __init__(self, node_id: str, store: KeyStore, agent: NodeAgent,
                 net: Network, sched: Scheduler, cal: CalibrationDelays,
                 controller_node: str, pqc_managers: dict | None = None,
                 supported_ppk_lengths: tuple[int, ...] = (32,),
                 default_ppk_len: int = 32) -> None:
        self.node_id = node_id
        self.identity = f"ks-{node_id}"
        self.store = store
        self.agent = agent
        self.net = net
        self.sched = sched
        self.cal = cal
        self.controller_node = controller_node
        self.pqc_managers = pqc_managers or {}
        self.supported_ppk_lengths = list(supported_ppk_lengths)
        self.default_ppk_len = default_ppk_len
        self.peers: list[str] = []
        self._psks: dict[str, bytes] = {}
        self._sync: dict[str, SyncEvent] = {}
        self._sync_waiters: dict[str, Trigger] = {}
        self.sync_log: list[SyncEvent] = []
        self.fetch_log: list[tuple[str, float, float]] = []  # ppk_id, sync_at, done_at
        agent.skip_sync_sink = self._on_sync

    # -- channel management ---------------------------------------------------

    def register_credential(self, psk_id: str, psk: bytes) -> None:
        self._psks[psk_id] = psk

    def open_channel(self, client_id: str, psk_id: str, psk: bytes) -> SkipChannel:
        expected = self._psks.get(psk_id)
        tag = prf_tag(psk, "skip-auth", client_id, psk_id)
        if expected is None or prf_tag(expected, "skip-auth", client_id, psk_id) != tag:
            return SkipChannel(client_id, psk_id, "REJECTED")
        return SkipChannel(client_id, psk_id, "AUTHENTICATED")

    def _require_auth(self, channel: SkipChannel) -> None:
        if channel.state != "AUTHENTICATED":
            raise AuthFailure(f"{self.identity}: channel for {channel.client_id} rejected")

    # -- operations ------------------------------------------------------------

    def get_capabilities(self, channel: SkipChannel):
        """Generator: capability snapshot after the local-call delay."""
        self._require_auth(channel)
        yield self.cal.skip_local_call_ms
        technologies = set()
        for pair in (pair_key(self.node_id, p) for p in self.peers):
            for source in self.store.sources_for(pair):
                if self.store.buffer_level(source).available_bits > 0:
                    tech = self.store.source_technology(source)
                    if tech is not None:
                        technologies.add(tech.value)
        return SkipCapabilities(
            local_identity=self.identity,
            peer_identities=[f"ks-{p}" for p in self.peers],
            supported_ppk_lengths=list(self.supported_ppk_lengths),
            technologies=sorted(technologies),
        )

    def get_key(self, channel: SkipChannel, peer: str, ppk_len: int | None = None):
        """Generator: issue (ppk, ppk_id, technology) toward *peer*.

        The PPK is drawn per the controller's source decision; issuance
        announces the id to the peer source right away so synchronization
        overlaps the remaining processing time.
        """
        self._require_auth(channel)
        if peer not in self.peers:
            raise UnknownPeer(f"{self.identity}: unknown peer key source {peer}")
        ppk_len = self.default_ppk_len if ppk_len is None else ppk_len
        if ppk_len not in self.supported_ppk_lengths:
            raise BadLength(
                f"{self.identity}: ppk length {ppk_len} unsupported "
                f"(supported: {self.supported_ppk_lengths})")
        yield self.cal.skip_local_call_ms
        pair = pair_key(self.node_id, peer)
        record = yield from self._issue(pair, ppk_len * 8)
        self._announce(pair, peer, record)
        yield self.cal.kms_processing_ms
        return record.ppk, record.ppk_id, record.technology.value

    def _issue(self, pair: tuple[str, str], bits: int):
        decision = self.agent.cached_decision(pair)
        if decision is None:
            decision = yield from self._ask_controller(pair, bits)
            if "key_id" in decision:
                return self.store.reserve(pair, bits, key_id=decision["key_id"])
        if decision["source"] == SourceKind.QKD.value:
            try:
                if decision.get("kind") == "RELAY_VIA":
                    fresh = yield from self._ask_controller(pair, bits)
                    if "key_id" in fresh:
                        return self.store.reserve(pair, bits, key_id=fresh["key_id"])
                    decision = fresh
                if decision.get("kind") == "DIRECT_QKD" and decision.get("links"):
                    return self.store.reserve(pair, bits, source_id=decision["links"][0])
            except (InsufficientKeyMaterial, NoPathAvailable, RpcTimeout) as exc:
                self._report_shortfall(pair, exc)
        # PQC pool (preferred, fallback, or failover path)
        return (yield from self._issue_pqc(pair, bits))

    def _issue_pqc(self, pair: tuple[str, str], bits: int):
        manager = self.pqc_managers.get(pair)
        try:
            return self.store.reserve(pair, bits, technology=Technology.PQC_KEM)
        except InsufficientKeyMaterial:
            if manager is None or manager.channel.down:
                raise NoKeyAvailable(
                    f"{self.identity}: all key sources exhausted for pair {pair}")
        ok, _ = yield with_timeout(self.sched, manager.wait_for_block(), SYNC_TIMEOUT_MS)
        if not ok:
            raise NoKeyAvailable(
                f"{self.identity}: PQC pool empty for pair {pair} and refill timed out")
        try:
            return self.store.reserve(pair, bits, technology=Technology.PQC_KEM)
        except InsufficientKeyMaterial as exc:
            raise NoKeyAvailable(f"{self.identity}: {exc}") from exc

    def _ask_controller(self, pair: tuple[str, str], bits: int):
        reply = yield from self.net.rpc(
            self.node_id, self.controller_node, "controller",
            {"type": "path_request", "pair": list(pair), "out_bits": bits})
        return reply

    def _report_shortfall(self, pair: tuple[str, str], exc: Exception) -> None:
        """Tell the controller the QKD side came up short (drives failover)."""
        decision = self.agent.cached_decision(pair)
        if not decision:
            return
        for link in decision.get("links", []):
            if link.startswith("pqc:"):
                continue
            try:
                stats = self.store.buffer_level(link)
            except QsVpnError:
                continue
            self.agent.report_link(link, None, stats.available_bits)

    def _announce(self, pair: tuple[str, str], peer: str, record: PpkRecord) -> None:
        """Propagate the issued ppk_id to the peer source via the agent channel."""
        body = {
            "type": "sync_forward", "dest": peer,
            "record": {
                "pair": list(pair), "ppk_id": record.ppk_id,
                "source": record.source, "technology": record.technology.value,
                "ppk_len": len(record.ppk),
            },
        }
        proc = self.sched.spawn(self.net.rpc(
            self.node_id, self.controller_node, "controller", body))
        proc._joined = True  # fire-and-forget; loss surfaces as fetch timeout

    def _on_sync(self, record: dict) -> None:
        event = SyncEvent(record["ppk_id"], self.sched.now, record)
        self._sync[event.ppk_id] = event
        self.sync_log.append(event)
        waiter = self._sync_waiters.pop(event.ppk_id, None)
        if waiter is not None:
            waiter.fire(event)

    def get_key_by_id(self, channel: SkipChannel, ppk_id: str):
        """Generator: responder-side fetch; blocks until the id announcement."""
        self._require_auth(channel)
        yield self.cal.skip_local_call_ms
        if ppk_id not in self._sync:
            trig = self._sync_waiters.setdefault(ppk_id, Trigger(self.sched))
            ok, _ = yield with_timeout(self.sched, trig, SYNC_TIMEOUT_MS)
            if not ok:
                self._sync_waiters.pop(ppk_id, None)
                raise UnknownPpkId(
                    f"{self.identity}: ppk_id {ppk_id} not announced within "
                    f"{SYNC_TIMEOUT_MS:.0f} ms")
        record = self.store.fetch_by_id(ppk_id)
        yield self.cal.kms_processing_ms
        self.fetch_log.append((ppk_id, self._sync[ppk_id].arrived_at, self.sched.now))
        return record.ppk

    # -- wire schema -------------------------------------------------------------

    def handle_wire(self, channel: SkipChannel, request: dict):
        """Generator: dispatch a schema-v1 request dict to a status-coded reply."""
        op = request.get("op")
        try:
            if op == "get_capabilities":
                caps = yield from self.get_capabilities(channel)
                return {"status": "OK", "local_identity": caps.local_identity,
                        "peer_identities": caps.peer_identities,
                        "supported_ppk_lengths": caps.supported_ppk_lengths,
                        "technologies": caps.technologies}
            if op == "get_key":
                ppk, ppk_id, technology = yield from self.get_key(
                    channel, request["peer"], request.get("ppk_len"))
                return {"status": "OK", "ppk": ppk.hex(), "ppk_id": ppk_id,
                        "technology": technology}
            if op == "get_key_by_id":
                ppk = yield from self.get_key_by_id(channel, request["ppk_id"])
                return {"status": "OK", "ppk": ppk.hex()}
        except QsVpnError as exc:
            code = STATUS_CODES.get(type(exc), type(exc).__name__)
            return {"status": code, "message": str(exc)}
        return {"status": "UNKNOWN_OPERATION", "message": f"unsupported op {op!r}"}


class SkipClient:
    """Router-side adapter bound to its node's local key source."""

    def __init__(self, service: SkipService, client_id: str,
                 psk_id: str, psk: bytes) -> None:
        self.service = service
        self.channel = service.open_channel(client_id, psk_id, psk)

    def get_capabilities(self):
        caps = yield from self.service.get_capabilities(self.channel)
        return caps

    def get_key(self, peer: str, ppk_len: int | None = None):
        result = yield from self.service.get_key(self.channel, peer, ppk_len)
        return result

    def get_key_by_id(self, ppk_id: str):
        ppk = yield from self.service.get_key_by_id(self.channel, ppk_id)
        return ppk
