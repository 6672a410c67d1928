"""Hub-and-spoke overlay with on-demand direct spoke tunnels.

Spokes register their transport (NBMA) address with the hub's next-hop
resolution service at boot and keep a permanent tunnel to the hub.  Traffic
between spokes initially travels through the hub (two overlay hops: the hub
decrypts the first leg and re-encrypts the second); the first such packet
triggers resolution of the destination's address plus a direct tunnel, and
once that association is ready packets flow spoke-to-spoke in one hop.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import (
    DecryptFailure,
    HubUnreachable,
    LinkDown,
    NoRoute,
    QsVpnError,
    ReplayedSequence,
    RpcTimeout,
    UnknownSpoke,
)
from .ike import IkeEndpoint, SecurityAssociation, protect_packet, unprotect_packet
from .sim import Scheduler
from .transport import Network


@dataclass
class NhrpEntry:
    spoke_id: str
    nbma_address: str
    registered_at: float


class NhrpServer:
    """Hub-side registry mapping overlay spokes to transport addresses."""

    def __init__(self, hub_id: str, net: Network, sched: Scheduler) -> None:
        self.hub_id = hub_id
        self.sched = sched
        self.entries: dict[str, NhrpEntry] = {}
        net.rpc_handler(hub_id, "nhrp", self._handle)

    def _handle(self, body: dict, src: str) -> dict:
        if body["type"] == "register":
            entry = NhrpEntry(body["spoke"], body["nbma"], self.sched.now)
            self.entries[body["spoke"]] = entry  # re-registration replaces
            return {"registered": body["spoke"], "at": entry.registered_at}
        if body["type"] == "resolve":
            entry = self.entries.get(body["dest"])
            if entry is None:
                raise UnknownSpoke(f"nhrp: spoke {body['dest']} not registered")
            return {"spoke": entry.spoke_id, "nbma": entry.nbma_address}
        raise UnknownSpoke(f"nhrp: unknown op {body['type']!r}")


@dataclass
class DeliveryRecord:
    stream: str
    seq: int
    src: str
    dst: str
    sent_at: float
    delivered_at: float
    hops: int
    ok: bool
    error: str = ""


class OverlayRouter:
    """Data-plane forwarding element colocated with one IKE endpoint."""

    def __init__(self, endpoint: IkeEndpoint, hub_id: str, nbma: str,
                 net: Network, sched: Scheduler, metrics=None,
                 dynamic_tunnels: bool = True) -> None:
        self.endpoint = endpoint
        self.node_id = endpoint.node_id
        self.is_hub = self.node_id == hub_id
        self.hub_id = hub_id
        self.nbma = nbma
        self.net = net
        self.sched = sched
        self.metrics = metrics
        self.dynamic_tunnels = dynamic_tunnels
        self.resolved: dict[str, str] = {}
        net.register(self.node_id, "data", self._on_data)

    # -- NHRP client -------------------------------------------------------

    def nhrp_register(self):
        try:
            reply = yield from self.net.rpc(self.node_id, self.hub_id, "nhrp", {
                "type": "register", "spoke": self.node_id, "nbma": self.nbma,
            }, timeout_ms=5000.0)
        except (RpcTimeout, LinkDown) as exc:
            raise HubUnreachable(f"{self.node_id}: cannot reach hub for nhrp: {exc}") from exc
        return reply

    def nhrp_resolve(self, dest: str):
        try:
            reply = yield from self.net.rpc(self.node_id, self.hub_id, "nhrp", {
                "type": "resolve", "dest": dest,
            }, timeout_ms=5000.0)
        except (RpcTimeout, LinkDown) as exc:
            raise HubUnreachable(f"{self.node_id}: nhrp resolve failed: {exc}") from exc
        self.resolved[dest] = reply["nbma"]
        return reply["nbma"]

    # -- forwarding ------------------------------------------------------------

    def send_app_packet(self, dst: str, payload: bytes, stream: str = "app",
                        seq: int = 0) -> dict:
        """Deliver *payload* to *dst* over the overlay.

        Returns the emitted packet; raises NoRoute when neither a direct
        association nor a hub path exists.  The first spoke-to-spoke packet
        travels via the hub and kicks off direct tunnel establishment.
        """
        sent_at = self.sched.now
        direct = self.endpoint.active_sa(dst)
        if direct is not None:
            return self._send_leg(direct, dst, dst, payload, stream, seq,
                                  sent_at, hops=1)
        if self.is_hub or dst == self.hub_id:
            raise NoRoute(f"{self.node_id}: no ready association toward {dst}")
        hub_sa = self.endpoint.active_sa(self.hub_id)
        if hub_sa is None:
            raise NoRoute(f"{self.node_id}: no hub tunnel and no direct tunnel to {dst}")
        if self.dynamic_tunnels:
            self._trigger_direct_tunnel(dst)
        return self._send_leg(hub_sa, self.hub_id, dst, payload, stream, seq,
                              sent_at, hops=2)

    def _send_leg(self, sa: SecurityAssociation, next_hop: str, final_dst: str,
                  payload: bytes, stream: str, seq: int, sent_at: float,
                  hops: int) -> dict:
        packet = {
            "stream": stream, "seq": seq, "src": self.node_id, "dst": final_dst,
            "sent_at": sent_at, "hops": hops,
            "leg": protect_packet(sa, self.node_id, payload),
        }
        self.net.send(self.node_id, next_hop, "data", packet)
        return packet

    def _trigger_direct_tunnel(self, dst: str) -> None:
        tunnel = self.endpoint.tunnel(dst)
        if tunnel.pending or tunnel.active_sa is not None:
            return
        tunnel.pending = True
        self.sched.spawn(self._establish_direct(dst))

    def _establish_direct(self, dst: str):
        tunnel = self.endpoint.tunnel(dst)
        try:
            yield from self.nhrp_resolve(dst)
            yield from self.endpoint.establish(dst)
            self.endpoint.start_rekey_loop(dst)
        except QsVpnError as exc:
            if self.metrics is not None:
                self.metrics.record_failure("direct-tunnel",
                                            tuple(sorted((self.node_id, dst))),
                                            str(exc), self.sched.now)
        finally:
            tunnel.pending = False

    def _on_data(self, packet: dict, src: str) -> None:
        sa = self.endpoint.sa_for_packet(packet["leg"])
        if sa is None:
            self._record(packet, ok=False, error="NoSuchSa")
            return
        try:
            payload = unprotect_packet(sa, packet["leg"])
        except (DecryptFailure, ReplayedSequence) as exc:
            self._record(packet, ok=False, error=type(exc).__name__)
            return
        if packet["dst"] == self.node_id:
            self._record(packet, ok=True)
            return
        if not self.is_hub:
            self._record(packet, ok=False, error="MisroutedPacket")
            return
        # hub leg: re-protect toward the final destination
        out_sa = self.endpoint.active_sa(packet["dst"])
        if out_sa is None:
            self._record(packet, ok=False, error="NoRouteAtHub")
            return
        forwarded = {
            **packet,
            "leg": protect_packet(out_sa, self.node_id, payload),
        }
        try:
            self.net.send(self.node_id, packet["dst"], "data", forwarded)
        except LinkDown:
            self._record(packet, ok=False, error="LinkDownAtHub")

    def _record(self, packet: dict, ok: bool, error: str = "") -> None:
        if self.metrics is None:
            return
        self.metrics.record_delivery(DeliveryRecord(
            stream=packet["stream"], seq=packet["seq"], src=packet["src"],
            dst=packet["dst"], sent_at=packet["sent_at"],
            delivered_at=self.sched.now, hops=packet["hops"], ok=ok, error=error,
        ))
