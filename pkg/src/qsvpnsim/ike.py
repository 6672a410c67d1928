"""Simplified IKEv2 state machine with preshared-key mixing.

Message contents are schematic records, not bit-exact encodings: the
contract here is timing semantics and key agreement, not wire conformance.
The classical ephemeral agreement is pluggable -- a deterministic toy
finite-field group (clearly labeled, NOT secure) keeps desk-scale runs
reproducible, and a real P-384 provider backed by the ``cryptography``
package fills the production slot.

Key derivation follows the hybrid scheme: the ephemeral exchange produces
SK'd; when a preshared key is in play the final derivation key is
``SK_d = PRF(PPK, SK'd)`` with PRF = HMAC-SHA-512, and data-plane keys are
expanded from SK_d.  Mixing uses the single-invocation form rather than the
RFC 8784 prf+ construction; see the README crypto notes.

Setup latency is recorded per security association as the exact
decomposition ``total = t_sa_init + t_get_key + t_ike_auth``:

* t_sa_init  -- from generation of the first request to completion of the
  initial exchange at the initiator;
* t_get_key  -- from there to generation of the auth request (the key-
  source fetch; zero in classical-only mode);
* t_ike_auth -- from the auth request to the association being ready.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    PublicFormat,
)

from .crypto import kdf_expand, prf, prf_tag
from .errors import (
    AuthFailure,
    BadPpk,
    DecryptFailure,
    LinkDown,
    NoKeyAvailable,
    NoRoute,
    PpkIdUnknownAtResponder,
    QsVpnError,
    ReplayedSequence,
    RpcTimeout,
    UnknownPpkId,
)
from .sim import Scheduler, Trigger
from .skip import CalibrationDelays, SkipClient
from .transport import Network, pair_key

DEFAULT_SA_LIFETIME_S = 600.0
ENC_NAME = "AES-GCM-256"
DEFAULT_DH_GROUP = "group 20 (P-384)"
TOY_DH_GROUP = "toy-ffdh-521 (NOT secure; deterministic test group)"


# --- pluggable ephemeral key agreement --------------------------------------

class DhProvider:
    name = "abstract"

    def generate(self) -> tuple[object, bytes]:
        raise NotImplementedError

    def shared(self, private: object, peer_public: bytes) -> bytes:
        raise NotImplementedError


class ToyModpGroup(DhProvider):
    """Deterministic finite-field group over the Mersenne prime 2^521 - 1.

    NOT SECURE. Exists so simulations are seed-reproducible without any
    crypto dependency; the exponent comes from the injected RNG.
    """

    name = TOY_DH_GROUP
    P = 2**521 - 1
    G = 3

    def __init__(self, rng: random.Random) -> None:
        self._rng = rng

    def generate(self) -> tuple[int, bytes]:
        exponent = self._rng.randrange(2, self.P - 2)
        public = pow(self.G, exponent, self.P)
        return exponent, public.to_bytes(66, "big")

    def shared(self, private: int, peer_public: bytes) -> bytes:
        value = pow(int.from_bytes(peer_public, "big"), private, self.P)
        return value.to_bytes(66, "big")


class P384Group(DhProvider):
    """Real ECDH over P-384 (group 20). Not seed-deterministic."""

    name = DEFAULT_DH_GROUP

    def generate(self) -> tuple[ec.EllipticCurvePrivateKey, bytes]:
        private = ec.generate_private_key(ec.SECP384R1())
        public = private.public_key().public_bytes(
            Encoding.X962, PublicFormat.UncompressedPoint)
        return private, public

    def shared(self, private: ec.EllipticCurvePrivateKey, peer_public: bytes) -> bytes:
        peer = ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP384R1(), peer_public)
        return private.exchange(ec.ECDH(), peer)


def make_dh(name: str, rng: random.Random) -> DhProvider:
    if name == "toy":
        return ToyModpGroup(rng)
    if name in ("p384", "group20"):
        return P384Group()
    raise QsVpnError(f"unknown DH provider {name!r}")


# --- key schedule ------------------------------------------------------------

def mix_ppk(ppk: bytes, sk_d_prime: bytes) -> bytes:
    """Final derivation key: HMAC-SHA-512 keyed by the PPK over SK'd."""
    if len(ppk) < 16:
        raise BadPpk(f"ppk must be at least 16 octets, got {len(ppk)}")
    return prf(ppk, sk_d_prime)


def derive_sk_d_prime(nonce_i: bytes, nonce_r: bytes, dh_shared: bytes,
                      spi_i: bytes, spi_r: bytes) -> bytes:
    return prf(nonce_i + nonce_r, dh_shared + spi_i + spi_r)


@dataclass
class KeySchedule:
    dh_shared: bytes
    sk_d_prime: bytes
    ppk: bytes | None
    sk_d: bytes
    prf_name: str = "HMAC-SHA-512"
    enc_name: str = ENC_NAME
    dh_group: str = DEFAULT_DH_GROUP


@dataclass
class LatencyBreakdown:
    t_sa_init: float = 0.0
    t_get_key: float = 0.0
    t_ike_auth: float = 0.0

    @property
    def total(self) -> float:
        return self.t_sa_init + self.t_get_key + self.t_ike_auth


class SaStatus(str, Enum):
    NEGOTIATING = "NEGOTIATING"
    READY = "READY"
    REKEYED = "REKEYED"
    EXPIRED = "EXPIRED"
    ABORTED = "ABORTED"


@dataclass
class SecurityAssociation:
    sa_id: str
    tunnel: tuple[str, str]
    initiator: str
    responder: str
    spi_i: bytes
    spi_r: bytes = b""
    key_schedule: KeySchedule | None = None
    lifetime_s: float = DEFAULT_SA_LIFETIME_S
    created_at: float = 0.0
    status: SaStatus = SaStatus.NEGOTIATING
    ppk_used: bool = False
    ppk_id: str | None = None
    source: str = "ECDH"
    latency: LatencyBreakdown = field(default_factory=LatencyBreakdown)
    rekey_of: str | None = None
    enc_key_i2r: bytes = b""
    enc_key_r2i: bytes = b""
    send_seq: dict[str, int] = field(default_factory=dict)
    recv_seen: dict[str, set] = field(default_factory=dict)
    recv_max: dict[str, int] = field(default_factory=dict)

    def derive_data_keys(self) -> None:
        assert self.key_schedule is not None
        sk_d = self.key_schedule.sk_d
        self.enc_key_i2r = kdf_expand(sk_d, f"esp|{self.sa_id}|i2r", 256)
        self.enc_key_r2i = kdf_expand(sk_d, f"esp|{self.sa_id}|r2i", 256)

    def age_s(self, now: float) -> float:
        # sub-nanosecond wiggle from float scheduling is not a real age
        return round((now - self.created_at) / 1000.0, 9)

    @property
    def quantum_resistant(self) -> bool:
        return self.ppk_used


REPLAY_WINDOW = 1024


def protect_packet(sa: SecurityAssociation, sender: str, plaintext: bytes) -> dict:
    """Authenticated encryption under the association's direction key."""
    direction = "i2r" if sender == sa.initiator else "r2i"
    key = sa.enc_key_i2r if direction == "i2r" else sa.enc_key_r2i
    seq = sa.send_seq.get(direction, 0) + 1
    sa.send_seq[direction] = seq
    nonce = b"\x00" * 4 + seq.to_bytes(8, "big")
    aad = sa.spi_i + sa.spi_r + direction.encode()
    ct = AESGCM(key).encrypt(nonce, plaintext, aad)
    return {"spi_i": sa.spi_i.hex(), "spi_r": sa.spi_r.hex(),
            "dir": direction, "seq": seq, "ct": ct.hex()}


def unprotect_packet(sa: SecurityAssociation, packet: dict) -> bytes:
    """Verify + decrypt; replay protection via a sliding window per direction."""
    direction = packet["dir"]
    seq = packet["seq"]
    seen = sa.recv_seen.setdefault(direction, set())
    max_seq = sa.recv_max.get(direction, 0)
    if seq in seen or (max_seq >= REPLAY_WINDOW and seq <= max_seq - REPLAY_WINDOW):
        raise ReplayedSequence(f"sa {sa.sa_id}: sequence {seq} replayed ({direction})")
    key = sa.enc_key_i2r if direction == "i2r" else sa.enc_key_r2i
    nonce = b"\x00" * 4 + seq.to_bytes(8, "big")
    aad = sa.spi_i + sa.spi_r + direction.encode()
    try:
        plaintext = AESGCM(key).decrypt(nonce, bytes.fromhex(packet["ct"]), aad)
    except InvalidTag as exc:
        raise DecryptFailure(f"sa {sa.sa_id}: authentication failed ({direction})") from exc
    seen.add(seq)
    if seq > max_seq:
        sa.recv_max[direction] = seq
        floor = seq - REPLAY_WINDOW
        if floor > 0 and len(seen) > 2 * REPLAY_WINDOW:
            sa.recv_seen[direction] = {s for s in seen if s > floor}
    return plaintext


# --- endpoint ----------------------------------------------------------------

@dataclass
class Tunnel:
    peer: str
    active_sa: SecurityAssociation | None = None
    pending: bool = False
    rekey_loop_started: bool = False


@dataclass
class RekeyRecord:
    tunnel: tuple[str, str]
    old_sa_id: str
    new_sa_id: str
    initiated_age_s: float
    completed_age_s: float
    old_ppk_id: str | None
    new_ppk_id: str | None
    at: float


class IkeEndpoint:
    """One router's IKE state machine plus its data-plane keys."""

    def __init__(
        self,
        node_id: str,
        net: Network,
        sched: Scheduler,
        rng: random.Random,
        psk: bytes,
        cal: CalibrationDelays,
        dh_name: str = "toy",
        skip_client: SkipClient | None = None,
        require_ppk: bool = True,
        use_ppk_default: bool | None = None,
        ppk_len: int = 32,
        lifetime_s: float = DEFAULT_SA_LIFETIME_S,
        rekey_margin_s: float = 60.0,
        fresh_ppk_on_rekey: bool = True,
        metrics=None,
    ) -> None:
        self.node_id = node_id
        self.net = net
        self.sched = sched
        self.rng = rng
        self.psk = psk
        self.cal = cal
        self.dh = make_dh(dh_name, rng)
        self.skip = skip_client
        self.require_ppk = require_ppk
        self.use_ppk_default = require_ppk if use_ppk_default is None else use_ppk_default
        self.ppk_len = ppk_len
        self.lifetime_s = lifetime_s
        self.rekey_margin_s = rekey_margin_s
        self.fresh_ppk_on_rekey = fresh_ppk_on_rekey
        self.metrics = metrics
        self.tunnels: dict[str, Tunnel] = {}
        self.sas: dict[str, SecurityAssociation] = {}
        self._by_spis: dict[tuple[str, str], SecurityAssociation] = {}
        self._half_open: dict[str, dict] = {}
        self._sa_seq = 0
        self._caps_done: dict[str, Trigger] = {}
        self.rekey_records: list[RekeyRecord] = []
        net.rpc_handler(node_id, "ike", self._on_ike)

    # -- helpers -------------------------------------------------------------

    def tunnel(self, peer: str) -> Tunnel:
        return self.tunnels.setdefault(peer, Tunnel(peer))

    def _new_spi(self) -> bytes:
        return self.rng.getrandbits(64).to_bytes(8, "big")

    def _new_sa_id(self) -> str:
        self._sa_seq += 1
        return f"{self.node_id}:{self._sa_seq:06d}"

    def active_sa(self, peer: str) -> SecurityAssociation | None:
        tunnel = self.tunnels.get(peer)
        if tunnel and tunnel.active_sa and tunnel.active_sa.status is SaStatus.READY:
            return tunnel.active_sa
        return None

    def sa_for_packet(self, packet: dict) -> SecurityAssociation | None:
        return self._by_spis.get((packet["spi_i"], packet["spi_r"]))

    # -- initiator side --------------------------------------------------------

    def establish(self, peer: str, use_ppk: bool | None = None,
                  rekey_of: SecurityAssociation | None = None):
        """Generator: run the full setup toward *peer*; returns a READY SA."""
        use_ppk = self.use_ppk_default if use_ppk is None else use_ppk
        if use_ppk and self.skip is not None:
            yield from self._ensure_capabilities(peer)
        sa = SecurityAssociation(
            sa_id=self._new_sa_id(), tunnel=pair_key(self.node_id, peer),
            initiator=self.node_id, responder=peer, spi_i=self._new_spi(),
            lifetime_s=self.lifetime_s,
        )
        self.sas[sa.sa_id] = sa
        private, public = self.dh.generate()
        nonce_i = self.rng.getrandbits(128).to_bytes(16, "big")
        t0 = self.sched.now
        try:
            reply = yield from self.net.rpc(self.node_id, peer, "ike", {
                "type": "init", "spi_i": sa.spi_i.hex(), "ke": public.hex(),
                "nonce": nonce_i.hex(), "ppk_expected": use_ppk,
            }, timeout_ms=8000.0)
        except (RpcTimeout, LinkDown) as exc:
            sa.status = SaStatus.ABORTED
            raise RpcTimeout(f"SA_INIT toward {peer}: {exc}") from exc
        yield self.cal.ecdh_compute_ms
        sa.spi_r = bytes.fromhex(reply["spi_r"])
        nonce_r = bytes.fromhex(reply["nonce"])
        dh_shared = self.dh.shared(private, bytes.fromhex(reply["ke"]))
        sk_d_prime = derive_sk_d_prime(nonce_i, nonce_r, dh_shared, sa.spi_i, sa.spi_r)
        sa.latency.t_sa_init = self.sched.now - t0

        t1 = self.sched.now
        ppk: bytes | None = None
        if use_ppk:
            if self.skip is None:
                raise NoKeyAvailable(f"{self.node_id}: no key source attached")
            try:
                ppk, ppk_id, technology = yield from self.skip.get_key(peer, self.ppk_len)
            except NoKeyAvailable:
                if self.require_ppk:
                    sa.status = SaStatus.ABORTED
                    raise
                ppk = None  # optional-PPK deployment: continue classical-only
            except QsVpnError:
                sa.status = SaStatus.ABORTED
                raise
            if ppk is not None:
                sa.ppk_id = ppk_id
                sa.ppk_used = True
                sa.source = technology
            sk_d = mix_ppk(ppk, sk_d_prime) if ppk is not None else sk_d_prime
        else:
            sk_d = sk_d_prime
        sa.latency.t_get_key = self.sched.now - t1

        sa.key_schedule = KeySchedule(
            dh_shared=dh_shared, sk_d_prime=sk_d_prime, ppk=ppk, sk_d=sk_d,
            dh_group=self.dh.name)
        # inbound keys must exist before the responder can start using the
        # new association (it activates on processing our auth request)
        sa.derive_data_keys()
        self._by_spis[(sa.spi_i.hex(), sa.spi_r.hex())] = sa
        t2 = self.sched.now
        auth_tag = prf_tag(self.psk, "ike-auth-i", sa.spi_i, sa.spi_r, sk_d, n=32)
        try:
            reply = yield from self.net.rpc(self.node_id, peer, "ike", {
                "type": "auth", "spi_i": sa.spi_i.hex(), "spi_r": sa.spi_r.hex(),
                "ppk_id": sa.ppk_id, "tag": auth_tag.hex(),
                "rekey_of": rekey_of.sa_id if rekey_of else None,
                "sa_id": sa.sa_id, "lifetime_s": sa.lifetime_s,
            }, timeout_ms=8000.0)
        except (RpcTimeout, LinkDown) as exc:
            self._abort(sa)
            raise RpcTimeout(f"IKE_AUTH toward {peer}: {exc}") from exc
        yield self.cal.ecdh_compute_ms
        expected = prf_tag(self.psk, "ike-auth-r", sa.spi_i, sa.spi_r, sk_d, n=32)
        if bytes.fromhex(reply["tag"]) != expected:
            self._abort(sa)
            raise AuthFailure(f"{self.node_id}: responder auth tag mismatch from {peer}")
        sa.latency.t_ike_auth = self.sched.now - t2
        sa.created_at = self.sched.now
        sa.status = SaStatus.READY
        self._activate(sa, rekey_of)
        if self.metrics is not None:
            self.metrics.record_sa(sa, self.node_id)
        return sa

    def _ensure_capabilities(self, peer: str):
        trig = self._caps_done.get(peer)
        if trig is None:
            trig = Trigger(self.sched)
            self._caps_done[peer] = trig
            caps = yield from self.skip.get_capabilities()
            trig.fire(caps)
        elif not trig.fired:
            yield trig
        return self._caps_done[peer].value

    def _activate(self, sa: SecurityAssociation, rekey_of: SecurityAssociation | None) -> None:
        tunnel = self.tunnel(sa.responder if sa.initiator == self.node_id else sa.initiator)
        old = tunnel.active_sa
        tunnel.active_sa = sa
        self._by_spis[(sa.spi_i.hex(), sa.spi_r.hex())] = sa
        if rekey_of is not None and old is not None and old.sa_id == rekey_of.sa_id:
            old.status = SaStatus.REKEYED
        self.sched.call_at(sa.created_at + sa.lifetime_s * 1000.0, self._expire_sa, sa)

    def _expire_sa(self, sa: SecurityAssociation) -> None:
        if sa.status in (SaStatus.READY, SaStatus.REKEYED):
            sa.status = SaStatus.EXPIRED
        if self._by_spis.get((sa.spi_i.hex(), sa.spi_r.hex())) is sa:
            self._by_spis.pop((sa.spi_i.hex(), sa.spi_r.hex()), None)

    def _abort(self, sa: SecurityAssociation) -> None:
        sa.status = SaStatus.ABORTED
        if self._by_spis.get((sa.spi_i.hex(), sa.spi_r.hex())) is sa:
            self._by_spis.pop((sa.spi_i.hex(), sa.spi_r.hex()), None)

    # -- responder side ---------------------------------------------------------

    def _on_ike(self, body: dict, src: str):
        if body["type"] == "init":
            return self._on_init(body, src)
        if body["type"] == "auth":
            return self._on_auth(body, src)
        raise QsVpnError(f"{self.node_id}: unknown ike message {body['type']!r}")

    def _on_init(self, body: dict, src: str):
        if body.get("ppk_expected") and self.skip is not None:
            self.sched.spawn(self._prefetch_caps(src))
        private, public = self.dh.generate()
        nonce_r = self.rng.getrandbits(128).to_bytes(16, "big")
        yield self.cal.ecdh_compute_ms
        spi_i = bytes.fromhex(body["spi_i"])
        spi_r = self._new_spi()
        dh_shared = self.dh.shared(private, bytes.fromhex(body["ke"]))
        sk_d_prime = derive_sk_d_prime(
            bytes.fromhex(body["nonce"]), nonce_r, dh_shared, spi_i, spi_r)
        self._half_open[body["spi_i"]] = {
            "spi_i": spi_i, "spi_r": spi_r, "dh_shared": dh_shared,
            "sk_d_prime": sk_d_prime, "peer": src,
        }
        return {"spi_r": spi_r.hex(), "ke": public.hex(), "nonce": nonce_r.hex()}

    def _prefetch_caps(self, peer: str):
        trig = self._caps_done.get(peer)
        if trig is not None:
            if not trig.fired:
                yield trig
            return
        trig = Trigger(self.sched)
        self._caps_done[peer] = trig
        caps = yield from self.skip.get_capabilities()
        trig.fire(caps)

    def _on_auth(self, body: dict, src: str):
        half = self._half_open.pop(body["spi_i"], None)
        if half is None:
            raise AuthFailure(f"{self.node_id}: auth for unknown spi {body['spi_i']}")
        ppk: bytes | None = None
        if body.get("ppk_id"):
            trig = self._caps_done.get(src)
            if trig is not None and not trig.fired:
                yield trig
            try:
                ppk = yield from self.skip.get_key_by_id(body["ppk_id"])
            except UnknownPpkId as exc:
                raise PpkIdUnknownAtResponder(str(exc)) from exc
            sk_d = mix_ppk(ppk, half["sk_d_prime"])
        else:
            if self.require_ppk:
                raise AuthFailure(
                    f"{self.node_id}: policy requires a preshared quantum key")
            sk_d = half["sk_d_prime"]
        yield self.cal.ecdh_compute_ms
        expected = prf_tag(self.psk, "ike-auth-i", half["spi_i"], half["spi_r"], sk_d, n=32)
        if bytes.fromhex(body["tag"]) != expected:
            raise AuthFailure(f"{self.node_id}: initiator auth tag mismatch from {src}")
        sa = SecurityAssociation(
            sa_id=body["sa_id"], tunnel=pair_key(self.node_id, src),
            initiator=src, responder=self.node_id,
            spi_i=half["spi_i"], spi_r=half["spi_r"],
            lifetime_s=body.get("lifetime_s", self.lifetime_s),
            created_at=self.sched.now, status=SaStatus.READY,
            ppk_used=ppk is not None, ppk_id=body.get("ppk_id"),
        )
        sa.key_schedule = KeySchedule(
            dh_shared=half["dh_shared"], sk_d_prime=half["sk_d_prime"],
            ppk=ppk, sk_d=sk_d, dh_group=self.dh.name)
        sa.derive_data_keys()
        self.sas[sa.sa_id] = sa
        rekey_of = self.sas.get(body.get("rekey_of") or "")
        self._activate(sa, rekey_of)
        return {"tag": prf_tag(self.psk, "ike-auth-r", half["spi_i"], half["spi_r"],
                               sk_d, n=32).hex(),
                "source": "PPK" if ppk is not None else "ECDH"}

    # -- rekey ------------------------------------------------------------------

    def start_rekey_loop(self, peer: str, use_ppk: bool | None = None) -> None:
        tunnel = self.tunnel(peer)
        if tunnel.rekey_loop_started:
            return
        tunnel.rekey_loop_started = True
        self.sched.spawn(self._rekey_loop(peer, use_ppk))

    def _rekey_loop(self, peer: str, use_ppk: bool | None):
        while True:
            tunnel = self.tunnel(peer)
            sa = tunnel.active_sa
            if sa is None or sa.status is not SaStatus.READY:
                return
            fire_at = sa.created_at + (sa.lifetime_s - self.rekey_margin_s) * 1000.0
            delay = fire_at - self.sched.now
            if delay > 0:
                yield delay
            sa = tunnel.active_sa
            if sa is None or sa.status is not SaStatus.READY:
                return
            initiated_age = sa.age_s(self.sched.now)
            fresh_ppk = (use_ppk if use_ppk is not None else self.require_ppk) \
                and self.fresh_ppk_on_rekey
            try:
                new_sa = yield from self.establish(peer, use_ppk=fresh_ppk, rekey_of=sa)
            except (NoKeyAvailable, RpcTimeout, AuthFailure) as exc:
                if self.metrics is not None:
                    self.metrics.record_failure("rekey", sa.tunnel, str(exc),
                                                self.sched.now)
                return  # policy abort: old SA runs out its lifetime
            record = RekeyRecord(
                tunnel=new_sa.tunnel, old_sa_id=sa.sa_id, new_sa_id=new_sa.sa_id,
                initiated_age_s=initiated_age, completed_age_s=sa.age_s(self.sched.now),
                old_ppk_id=sa.ppk_id, new_ppk_id=new_sa.ppk_id, at=self.sched.now)
            self.rekey_records.append(record)
            if self.metrics is not None:
                self.metrics.record_rekey(record)

    def delete_sa(self, sa: SecurityAssociation) -> None:
        """Tear down (measurement/testing helper)."""
        sa.status = SaStatus.EXPIRED
        self._by_spis.pop((sa.spi_i.hex(), sa.spi_r.hex()), None)
        for tunnel in self.tunnels.values():
            if tunnel.active_sa is sa:
                tunnel.active_sa = None
