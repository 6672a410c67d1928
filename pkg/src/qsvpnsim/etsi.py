"""Standard-shaped key delivery endpoints over the local keystore.

Two flavors are exposed per consumer SAE, mirroring the common industry
interfaces:

* a REST-style endpoint (``status`` / ``get_key`` / ``get_key_with_ids``)
  returning key containers with base64-encoded octets, and
* a session-style endpoint (``open_connect`` / ``get_key(index)`` /
  ``close``) delivering a chunk stream that is identical at both ends for
  equal ``(ksid, index)``.

QoS structures are accepted on open but only the chunk size is honored.
Both flavors draw from the same per-pair ledger, so a key id handed out on
one interface can never be re-issued on the other.

Wire schema (version 1): requests and responses are flat dicts with an
``op`` field; see docs/protocols.md for the field tables.  Endpoints are
callable in-process and over the line-oriented JSON socket transport in
:mod:`qsvpnsim.etsi_socket`.
"""

from __future__ import annotations

import base64
from contextlib import suppress
from dataclasses import dataclass, field

from .errors import (
    BadSize,
    ClosedSession,
    InsufficientKeyMaterial,
    KeyAlreadyConsumed,
    KeyExpired,
    NoKeySourceForPair,
    OutOfOrderIndex,
    UnknownPeer,
    UnknownPpkId,
    UnknownSession,
)
from .keystore import KeyStore, PairLedger, pair_key

SCHEMA_VERSION = 1
DEFAULT_MAX_KEYS_PER_REQUEST = 128


@dataclass
class Etsi014Key:
    key_id: str
    key_b64: str

    def key_bytes(self) -> bytes:
        return base64.b64decode(self.key_b64)


@dataclass
class Etsi014KeyContainer:
    keys: list[Etsi014Key]


@dataclass
class Etsi014Status:
    source_kme_id: str
    target_kme_id: str
    stored_key_count: int
    key_size_bits: int
    max_key_per_request: int


@dataclass
class Etsi004Session:
    ksid: str
    pair: tuple[str, str]
    source_sae: str
    dest_sae: str
    chunk_size_bits: int
    state: str = "OPEN"
    next_index: dict[str, int] = field(default_factory=dict)
    chunks: dict[int, str] = field(default_factory=dict)  # index -> ppk_id
    qos: dict = field(default_factory=dict)


def sae_id(node_id: str) -> str:
    return f"sae-{node_id}"


def node_of_sae(sae: str) -> str:
    return sae.removeprefix("sae-")


class Etsi014Endpoint:
    """REST-style delivery endpoint for one node's store."""

    def __init__(self, store: KeyStore, local_node: str,
                 source_for_peer: dict[str, str],
                 max_per_request: int = DEFAULT_MAX_KEYS_PER_REQUEST) -> None:
        self.store = store
        self.local_node = local_node
        self.local_sae = sae_id(local_node)
        self._source_for_peer = dict(source_for_peer)
        self.max_per_request = max_per_request

    def add_peer(self, peer_node: str, source_id: str) -> None:
        self._source_for_peer[peer_node] = source_id

    def _resolve(self, peer_sae: str) -> tuple[tuple[str, str], str]:
        peer = node_of_sae(peer_sae)
        source = self._source_for_peer.get(peer)
        if source is None:
            raise UnknownPeer(f"{self.local_sae}: no key source toward {peer_sae}")
        return pair_key(self.local_node, peer), source

    def status(self, peer_sae: str) -> Etsi014Status:
        _pair, source = self._resolve(peer_sae)
        sizes = self.store.available_block_sizes(source)
        key_size = sizes[0] if sizes else 0
        return Etsi014Status(
            source_kme_id=self.local_sae, target_kme_id=peer_sae,
            stored_key_count=len(sizes), key_size_bits=key_size,
            max_key_per_request=self.max_per_request,
        )

    def get_key(self, peer_sae: str, number: int = 1,
                size_bits: int | None = None) -> Etsi014KeyContainer:
        pair, source = self._resolve(peer_sae)
        if number < 1:
            raise BadSize(f"number must be >= 1, got {number}")
        if size_bits is None:
            size_bits = 256
        if size_bits <= 0 or size_bits % 8 != 0:
            raise BadSize(f"size must be a positive multiple of 8 bits, got {size_bits}")
        if number > self.max_per_request:
            raise BadSize(f"number {number} exceeds max per request {self.max_per_request}")
        available = self.store.buffer_level(source).available_bits
        if available < number * size_bits:
            raise InsufficientKeyMaterial(
                f"{self.local_sae}: need {number * size_bits} bits toward {peer_sae}, "
                f"have {available}"
            )
        keys = []
        for _ in range(number):
            rec = self.store.reserve(pair, size_bits, source_id=source,
                                     enforce_ppk_min=False)
            keys.append(Etsi014Key(rec.ppk_id, base64.b64encode(rec.ppk).decode()))
        return Etsi014KeyContainer(keys)

    def get_key_with_ids(self, peer_sae: str, ids: list[str]) -> Etsi014KeyContainer:
        self._resolve(peer_sae)
        keys = []
        for kid in ids:
            rec = self.store.fetch_by_id(kid)
            keys.append(Etsi014Key(rec.ppk_id, base64.b64encode(rec.ppk).decode()))
        return Etsi014KeyContainer(keys)


class Etsi004Endpoint:
    """Session-style delivery endpoint for one node's store."""

    def __init__(self, store: KeyStore, local_node: str,
                 source_for_peer: dict[str, str]) -> None:
        self.store = store
        self.local_node = local_node
        self.local_sae = sae_id(local_node)
        self._source_for_peer = dict(source_for_peer)

    def add_peer(self, peer_node: str, source_id: str) -> None:
        self._source_for_peer[peer_node] = source_id

    def _pair_ledger(self, other_node: str) -> tuple[tuple[str, str], str, PairLedger]:
        source = self._source_for_peer.get(other_node)
        if source is None:
            raise NoKeySourceForPair(
                f"{self.local_sae}: no key source toward sae-{other_node}")
        pair = pair_key(self.local_node, other_node)
        return pair, source, self.store.ledger_for(pair)

    def open_connect(self, source_sae: str, dest_sae: str,
                     chunk_size_bits: int = 256, qos: dict | None = None) -> str:
        """Open a delivery session; the dest SAE's endpoint sees the same ksid."""
        other = node_of_sae(dest_sae if source_sae == self.local_sae else source_sae)
        pair, source, ledger = self._pair_ledger(other)
        if chunk_size_bits <= 0 or chunk_size_bits % 8 != 0:
            raise BadSize(f"chunk size must be a positive multiple of 8, got {chunk_size_bits}")
        seq = ledger.next_seq("etsi004")
        ksid = f"ksid-{ledger.tag.hex()}-{seq:06d}"
        session = Etsi004Session(
            ksid=ksid, pair=pair, source_sae=source_sae, dest_sae=dest_sae,
            chunk_size_bits=chunk_size_bits, qos=dict(qos or {}),
        )
        session.next_index[source_sae] = 0
        session.next_index[dest_sae] = 0
        ledger.sessions[ksid] = session
        return ksid

    def _session(self, ksid: str) -> Etsi004Session:
        for peer in self._source_for_peer:
            ledger = self.store.ledger_for(pair_key(self.local_node, peer))
            session = ledger.sessions.get(ksid)
            if session is not None:
                return session  # type: ignore[return-value]
        raise UnknownSession(f"{self.local_sae}: unknown session {ksid}")

    def get_key(self, ksid: str, index: int) -> bytes:
        """Deliver chunk *index*; both ends get identical bytes per index."""
        session = self._session(ksid)
        if session.state != "OPEN":
            raise ClosedSession(f"session {ksid} is closed")
        expected = session.next_index.get(self.local_sae, 0)
        if index != expected:
            raise OutOfOrderIndex(
                f"session {ksid}: expected index {expected} at {self.local_sae}, got {index}")
        ledger = self.store.ledger_for(session.pair)
        if index not in session.chunks:
            source = self._source_for_peer[
                session.pair[0] if session.pair[1] == self.local_node else session.pair[1]]
            rec = self.store.reserve(session.pair, session.chunk_size_bits,
                                     source_id=source, enforce_ppk_min=False)
            session.chunks[index] = rec.ppk_id
        session.next_index[self.local_sae] = index + 1
        return self.store.fetch_by_id(session.chunks[index]).ppk

    def close(self, ksid: str) -> dict:
        """Close the session; reserved-but-undelivered chunks are destroyed."""
        session = self._session(ksid)
        if session.state == "CLOSED":
            return {"ksid": ksid, "state": "CLOSED"}
        session.state = "CLOSED"
        for ppk_id in session.chunks.values():
            for store in self.store.ledger_for(session.pair).stores:
                with suppress(KeyAlreadyConsumed, KeyExpired, UnknownPpkId):
                    store.destroy_reserved(ppk_id)
        return {"ksid": ksid, "state": "CLOSED"}


def handle_wire(endpoint_014: Etsi014Endpoint | None,
                endpoint_004: Etsi004Endpoint | None, request: dict) -> dict:
    """Dispatch a schema-v1 wire request to the right endpoint.

    Returns ``{"status": "OK", ...}`` or ``{"status": "<ERROR_NAME>",
    "message": ...}``.
    """
    op = request.get("op", "")
    try:
        if op == "etsi014.status" and endpoint_014:
            st = endpoint_014.status(request["peer_sae"])
            return {"status": "OK", "version": SCHEMA_VERSION,
                    "stored_key_count": st.stored_key_count,
                    "key_size_bits": st.key_size_bits,
                    "max_key_per_request": st.max_key_per_request}
        if op == "etsi014.get_key" and endpoint_014:
            container = endpoint_014.get_key(
                request["peer_sae"], request.get("number", 1), request.get("size_bits"))
            return {"status": "OK", "version": SCHEMA_VERSION,
                    "keys": [{"key_ID": k.key_id, "key": k.key_b64} for k in container.keys]}
        if op == "etsi014.get_key_with_ids" and endpoint_014:
            container = endpoint_014.get_key_with_ids(request["peer_sae"], request["ids"])
            return {"status": "OK", "version": SCHEMA_VERSION,
                    "keys": [{"key_ID": k.key_id, "key": k.key_b64} for k in container.keys]}
        if op == "etsi004.open_connect" and endpoint_004:
            ksid = endpoint_004.open_connect(
                request["source_sae"], request["dest_sae"],
                request.get("chunk_size_bits", 256), request.get("qos"))
            return {"status": "OK", "version": SCHEMA_VERSION, "ksid": ksid}
        if op == "etsi004.get_key" and endpoint_004:
            chunk = endpoint_004.get_key(request["ksid"], request["index"])
            return {"status": "OK", "version": SCHEMA_VERSION,
                    "key": base64.b64encode(chunk).decode()}
        if op == "etsi004.close" and endpoint_004:
            ack = endpoint_004.close(request["ksid"])
            return {"status": "OK", "version": SCHEMA_VERSION, **ack}
    except Exception as exc:  # registered simulator errors map to status codes
        return {"status": type(exc).__name__, "message": str(exc)}
    return {"status": "UnknownOperation", "message": f"unsupported op {op!r}"}
