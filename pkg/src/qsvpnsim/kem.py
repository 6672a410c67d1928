"""Key-encapsulation abstraction and the inter-KMS establishment procedure.

The KEM itself is a provider interface.  The repo ships ``StubKem``, a
deterministic PRF-based mock that is NOT cryptographically secure -- it
exists so the whole system is testable with no external crypto dependency.
It honors the registered parameter-set lengths, is correct
(decaps(encaps) == ss), and mimics implicit rejection: flipping any
ciphertext bit yields a different, deterministic shared secret rather than
an error.  A real lattice provider can be registered under its own name and
drops into the same slots.

Registered parameter sets carry the standardized module-lattice KEM sizes
(encapsulation key / decapsulation key / ciphertext / shared secret, in
octets): 800/1632/768/32, 1184/2400/1088/32 and 1568/3168/1568/32 for the
three security levels.

``establish_kms_key`` runs the two-message exchange over an authenticated
pair channel and commits identical key blocks to both stores in a single
simulation event, so a fault injected at any point leaves either both
stores updated or neither.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .crypto import kdf_expand, prf_stream, prf_tag, sha256_hex, xor_bytes
from .errors import (
    AuthFailure,
    ChannelDown,
    KemFailure,
    LinkDown,
    MalformedCiphertext,
    MalformedKey,
    RpcTimeout,
    UnknownParams,
)
from .keystore import KeyBlock, KeyStore, PairLedger, Technology, pair_key
from .sim import Scheduler, Trigger
from .transport import Network

KDF_CONTEXT_PREFIX = "QSM-KMS-v1"


@dataclass(frozen=True)
class KemParams:
    name: str
    ek_len: int
    dk_len: int
    ct_len: int
    ss_len: int


PARAMS_REGISTRY: dict[str, KemParams] = {
    "ML-KEM-512": KemParams("ML-KEM-512", 800, 1632, 768, 32),
    "ML-KEM-768": KemParams("ML-KEM-768", 1184, 2400, 1088, 32),
    "ML-KEM-1024": KemParams("ML-KEM-1024", 1568, 3168, 1568, 32),
}


def get_params(name: str) -> KemParams:
    if name not in PARAMS_REGISTRY:
        raise UnknownParams(f"unknown KEM parameter set {name!r}")
    return PARAMS_REGISTRY[name]


@dataclass
class KemKeyPair:
    ek: bytes
    dk: bytes
    params: KemParams


class KemProvider:
    """keygen / encaps / decaps triple over a fixed parameter set."""

    name = "abstract"

    def __init__(self, params: KemParams) -> None:
        self.params = params

    def keygen(self) -> KemKeyPair:
        raise NotImplementedError

    def encaps(self, ek: bytes) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def decaps(self, dk: bytes, ct: bytes) -> bytes:
        raise NotImplementedError


class StubKem(KemProvider):
    """Deterministic PRF-based stand-in. NOT SECURE -- simulation only.

    dk = seed || pad(seed); ek = G("ek", seed).  Encapsulation hides a fresh
    32-octet message under a mask derived from the public key and binds the
    shared secret to the full ciphertext, so any single-bit ciphertext flip
    changes the decapsulated secret (implicit-rejection style).
    """

    name = "stub"

    def __init__(self, params: KemParams, rng: random.Random) -> None:
        super().__init__(params)
        self._rng = rng

    def _rand(self, n: int) -> bytes:
        return self._rng.getrandbits(n * 8).to_bytes(n, "big")

    def keygen(self) -> KemKeyPair:
        seed = self._rand(32)
        dk = seed + prf_stream(b"stub-dk-pad", seed, self.params.dk_len - 32)
        ek = prf_stream(b"stub-ek", seed, self.params.ek_len)
        return KemKeyPair(ek=ek, dk=dk, params=self.params)

    def encaps(self, ek: bytes) -> tuple[bytes, bytes]:
        if len(ek) != self.params.ek_len:
            raise MalformedKey(
                f"ek length {len(ek)} != {self.params.ek_len} for {self.params.name}")
        msg = self._rand(32)
        ct = self._build_ct(ek, msg)
        return ct, self._secret(ct, msg)

    def decaps(self, dk: bytes, ct: bytes) -> bytes:
        if len(dk) != self.params.dk_len:
            raise MalformedKey(
                f"dk length {len(dk)} != {self.params.dk_len} for {self.params.name}")
        if len(ct) != self.params.ct_len:
            raise MalformedCiphertext(
                f"ct length {len(ct)} != {self.params.ct_len} for {self.params.name}")
        ek = prf_stream(b"stub-ek", dk[:32], self.params.ek_len)
        mask = prf_stream(b"stub-mask", ek, 32)
        msg = xor_bytes(ct[:32], mask)
        return self._secret(ct, msg)

    def _build_ct(self, ek: bytes, msg: bytes) -> bytes:
        mask = prf_stream(b"stub-mask", ek, 32)
        head = xor_bytes(msg, mask)
        tail = prf_stream(b"stub-ct-pad", ek + msg, self.params.ct_len - 32)
        return head + tail

    def _secret(self, ct: bytes, msg: bytes) -> bytes:
        return prf_stream(b"stub-ss", prf_stream(b"ct-digest", ct, 32) + msg,
                          self.params.ss_len)


PROVIDER_FACTORIES = {
    "stub": StubKem,
}


def make_provider(provider_name: str, params_name: str, rng: random.Random) -> KemProvider:
    if provider_name not in PROVIDER_FACTORIES:
        raise UnknownParams(f"no KEM provider registered under {provider_name!r}")
    return PROVIDER_FACTORIES[provider_name](get_params(params_name), rng)


def kms_kdf_context(pair: tuple[str, str], session_id: str) -> str:
    a, b = pair_key(*pair)
    return f"{KDF_CONTEXT_PREFIX}|{a}|{b}|{session_id}"


class KmsResponder:
    """Per-node handler answering KEM establishment requests from peers."""

    def __init__(self, node_id: str, net: Network, provider: KemProvider) -> None:
        self.node_id = node_id
        self.net = net
        self.provider = provider
        self._psks: dict[tuple[str, str], bytes] = {}
        self._pair_state: dict[tuple[str, str], dict] = {}
        self._pending: dict[str, dict] = {}
        net.rpc_handler(node_id, "kms", self._handle)

    def set_pair(self, pair: tuple[str, str], psk: bytes,
                 ledger: PairLedger, source_id: str, key_lifetime_ms: float) -> None:
        key = pair_key(*pair)
        self._psks[key] = psk
        self._pair_state[key] = {
            "ledger": ledger, "source_id": source_id, "lifetime": key_lifetime_ms,
        }

    def _check_auth(self, body: dict, peer: str) -> tuple[tuple[str, str], dict]:
        pair = pair_key(self.node_id, peer)
        psk = self._psks.get(pair)
        if psk is None:
            raise AuthFailure(f"{self.node_id}: no KMS credential for pair {pair}")
        expected = prf_tag(psk, "kms-auth", body["session_id"], body["step"])
        if bytes.fromhex(body["tag"]) != expected:
            raise AuthFailure(f"{self.node_id}: bad KMS channel tag from {peer}")
        return pair, self._pair_state[pair]

    def _handle(self, body: dict, src: str):
        pair, state = self._check_auth(body, src)
        if body["step"] == "init":
            ek = bytes.fromhex(body["ek"])
            ct, ss = self.provider.encaps(ek)
            self._pending[body["session_id"]] = {
                "ss": ss, "pair": pair, "out_bits": body["out_bits"],
                "key_id": body["key_id"],
            }
            return {"ct": ct.hex()}
        if body["step"] == "commit":
            pending = self._pending.pop(body["session_id"], None)
            if pending is None:
                raise KemFailure(f"{self.node_id}: commit for unknown session")
            okm = kdf_expand(pending["ss"], kms_kdf_context(pair, body["session_id"]),
                             pending["out_bits"])
            if sha256_hex(okm) != body["okm_digest"]:
                raise KemFailure(f"{self.node_id}: shared secret mismatch on commit")
            now = body["now"]
            block = KeyBlock(
                key_id=pending["key_id"], key_bytes=okm,
                origin=state["source_id"], technology=Technology.PQC_KEM,
                created_at=now, expires_at=now + state["lifetime"],
            )
            # single-event synchronized ingest: both stores or neither
            state["ledger"].ingest_synced(block)
            return {"ingested": pending["key_id"]}
        raise KemFailure(f"unknown KMS step {body['step']!r}")


class KmsInitiator:
    """Initiator side of the pairwise KEM key establishment."""

    def __init__(self, node_id: str, net: Network, sched: Scheduler,
                 provider: KemProvider) -> None:
        self.node_id = node_id
        self.net = net
        self.sched = sched
        self.provider = provider

    def establish(self, peer: str, psk: bytes, ledger: PairLedger,
                  out_bits: int, severed: "ChannelState", timeout_ms: float = 10_000.0):
        """Generator: run one establishment; returns the new block's key id."""
        pair = pair_key(self.node_id, peer)
        seq = ledger.next_seq("pqc")
        session_id = f"pqc-{ledger.tag.hex()}-{seq:08d}"
        key_id = session_id
        keypair = self.provider.keygen()

        def tagged(step: str, extra: dict) -> dict:
            body = {"session_id": session_id, "step": step, **extra}
            body["tag"] = prf_tag(psk, "kms-auth", session_id, step).hex()
            return body

        if severed.down:
            raise ChannelDown(f"KMS channel {pair} is severed")
        try:
            reply = yield from self.net.rpc(
                self.node_id, peer, "kms",
                tagged("init", {"ek": keypair.ek.hex(), "out_bits": out_bits,
                                "key_id": key_id}),
                timeout_ms=timeout_ms)
        except (RpcTimeout, LinkDown) as exc:
            raise ChannelDown(f"KMS channel {pair}: {exc}") from exc
        if severed.down:
            raise ChannelDown(f"KMS channel {pair} severed mid-exchange")
        ss = self.provider.decaps(keypair.dk, bytes.fromhex(reply["ct"]))
        okm = kdf_expand(ss, kms_kdf_context(pair, session_id), out_bits)
        try:
            yield from self.net.rpc(
                self.node_id, peer, "kms",
                tagged("commit", {"okm_digest": sha256_hex(okm), "now": self.sched.now}),
                timeout_ms=timeout_ms)
        except (RpcTimeout, LinkDown) as exc:
            raise ChannelDown(f"KMS channel {pair}: {exc}") from exc
        return key_id


@dataclass
class ChannelState:
    down: bool = False


class PqcPairManager:
    """Keeps a pair's PQC-sourced pool topped up (pre-provisioning).

    Runs as a background process; consumers that find the pool empty can
    ``wait_for_block`` and are woken on the next successful establishment.
    """

    def __init__(self, net: Network, sched: Scheduler, pair: tuple[str, str],
                 initiator: KmsInitiator, psk: bytes, ledger: PairLedger,
                 source_id: str, store: KeyStore, block_bits: int = 256,
                 pool_min_blocks: int = 8, poll_ms: float = 1000.0) -> None:
        self.net = net
        self.sched = sched
        self.pair = pair_key(*pair)
        self.initiator = initiator
        self.psk = psk
        self.ledger = ledger
        self.source_id = source_id
        self.store = store
        self.block_bits = block_bits
        self.pool_min_blocks = pool_min_blocks
        self.poll_ms = poll_ms
        self.channel = ChannelState()
        self._waiters: list[Trigger] = []
        self._started = False

    def start(self) -> None:
        if not self._started:
            self._started = True
            self.sched.spawn(self._loop())

    def available_blocks(self) -> int:
        return self.store.buffer_level(self.source_id).available_bits // self.block_bits

    def sever(self) -> None:
        self.channel.down = True

    def restore(self) -> None:
        self.channel.down = False

    def wait_for_block(self) -> Trigger:
        trig = Trigger(self.sched)
        if self.available_blocks() > 0:
            trig.fire(None)
        else:
            self._waiters.append(trig)
        return trig

    def _loop(self):
        while True:
            while not self.channel.down and self.available_blocks() < self.pool_min_blocks:
                try:
                    yield from self.initiator.establish(
                        self._peer(), self.psk, self.ledger, self.block_bits,
                        self.channel)
                except ChannelDown:
                    break
                waiters, self._waiters = self._waiters, []
                for trig in waiters:
                    trig.fire(None)
            yield self.poll_ms

    def _peer(self) -> str:
        a, b = self.pair
        return b if self.initiator.node_id == a else a
