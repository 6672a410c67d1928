"""Per-node key material store (the local KMS key pool).

Each node runs one :class:`KeyStore`.  Key blocks always belong to a node
pair and arrive synchronized: the same block (same id, same bytes) is
ingested at both ends.  The two stores of a pair share a :class:`PairLedger`
that serializes issuance, so a preshared-key id handed out at one end is
immediately reserved at both and can never be double-spent or re-derived
differently at the peer.  The ledger is the linearizable kernel; message
timing (when the peer *learns* about an id) is enforced one layer up by the
key-source services.

Lifecycle: AVAILABLE -> RESERVED -> CONSUMED, any non-final state -> EXPIRED.
Accounting is exact: per source, available + reserved + consumed + expired
bits always equal total ingested bits.
"""

from __future__ import annotations

import bisect
import heapq
from dataclasses import dataclass, field
from enum import Enum

from .crypto import prf_stream
from .errors import (
    DuplicateKeyId,
    InsufficientKeyMaterial,
    KeyAlreadyConsumed,
    KeyExpired,
    MalformedBlock,
    NoSuchPair,
    UnknownPpkId,
    UnknownSource,
)

DEFAULT_KEY_LIFETIME_MS = 24 * 3600 * 1000.0  # producing source may override
DEFAULT_PPK_LEN = 32  # octets; matches the AES-256 data-plane key size
MIN_PPK_LEN = 16


class Technology(str, Enum):
    DV_QKD = "DV_QKD"
    CV_QKD = "CV_QKD"
    PQC_KEM = "PQC_KEM"
    RELAYED = "RELAYED"


class BlockState(str, Enum):
    AVAILABLE = "AVAILABLE"
    RESERVED = "RESERVED"
    CONSUMED = "CONSUMED"
    EXPIRED = "EXPIRED"


def pair_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


def pair_tag(pair: tuple[str, str]) -> bytes:
    """Stable 8-octet tag for a node pair, used as the ppk_id prefix."""
    return prf_stream(b"pair-tag", f"{pair[0]}|{pair[1]}", 8)


@dataclass
class KeyBlock:
    key_id: str
    key_bytes: bytes
    origin: str
    technology: Technology
    created_at: float
    expires_at: float
    state: BlockState = BlockState.AVAILABLE

    def validate(self) -> None:
        if not self.key_bytes:
            raise MalformedBlock(f"block {self.key_id}: empty key material")
        if self.expires_at <= self.created_at:
            raise MalformedBlock(
                f"block {self.key_id}: expires_at {self.expires_at} <= created_at {self.created_at}"
            )

    @property
    def bits(self) -> int:
        return len(self.key_bytes) * 8


@dataclass
class PpkRecord:
    ppk_id: str
    ppk: bytes
    pair: tuple[str, str]
    expires_at: float
    technology: Technology
    source: str


@dataclass
class BufferStats:
    source_id: str
    available_bits: int = 0
    reserved_bits: int = 0
    consumed_bits: int = 0
    expired_bits: int = 0
    ingested_bits: int = 0
    threshold_bits: int = 0

    def conserved(self) -> bool:
        return (self.available_bits + self.reserved_bits
                + self.consumed_bits + self.expired_bits) == self.ingested_bits


@dataclass
class _Issue:
    ppk_id: str
    key_id: str
    ppk_len: int
    issuer: str


class PairLedger:
    """Shared issuance state for the two stores of one node pair."""

    def __init__(self, pair: tuple[str, str]) -> None:
        self.pair = pair_key(*pair)
        self.tag = pair_tag(self.pair)
        self.issued: dict[str, _Issue] = {}
        self.claimed: set[str] = set()
        self.stores: list["KeyStore"] = []
        self.counters: dict[str, int] = {}
        self.sessions: dict[str, object] = {}  # ETSI 004 session records

    def attach(self, store: "KeyStore") -> None:
        if store not in self.stores:
            self.stores.append(store)

    def next_seq(self, namespace: str) -> int:
        n = self.counters.get(namespace, 0)
        self.counters[namespace] = n + 1
        return n

    def new_ppk_id(self) -> str:
        counter = self.next_seq("ppk")
        return (self.tag + counter.to_bytes(8, "big")).hex()

    def claim(self, key_id: str) -> None:
        self.claimed.add(key_id)
        for store in self.stores:
            store._mark_reserved(key_id)

    def ingest_synced(self, block: KeyBlock) -> None:
        """Ingest identical copies of *block* into every attached store."""
        for store in self.stores:
            store.ingest(KeyBlock(
                key_id=block.key_id, key_bytes=block.key_bytes, origin=block.origin,
                technology=block.technology, created_at=block.created_at,
                expires_at=block.expires_at,
            ))


class KeyStore:
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        self._blocks: dict[str, KeyBlock] = {}
        self._seen_ids: set[str] = set()
        self._ledgers: dict[tuple[str, str], PairLedger] = {}
        self._sources: dict[str, tuple[str, str]] = {}
        self._source_tech: dict[str, Technology | None] = {}
        self._source_fifo: dict[str, list[tuple[float, str]]] = {}
        self._fifo_head: dict[str, int] = {}
        self._stats: dict[str, BufferStats] = {}
        self._expiry_heap: list[tuple[float, str]] = []

    # -- wiring --------------------------------------------------------------

    def register_pair(self, pair: tuple[str, str], ledger: PairLedger) -> None:
        self._ledgers[pair_key(*pair)] = ledger
        ledger.attach(self)

    def register_source(self, source_id: str, pair: tuple[str, str],
                        technology: Technology | None = None,
                        threshold_bits: int = 0) -> None:
        self._sources[source_id] = pair_key(*pair)
        self._source_tech[source_id] = technology
        self._source_fifo.setdefault(source_id, [])
        self._fifo_head.setdefault(source_id, 0)
        self._stats.setdefault(source_id, BufferStats(source_id, threshold_bits=threshold_bits))

    def ledger_for(self, pair: tuple[str, str]) -> PairLedger:
        key = pair_key(*pair)
        if key not in self._ledgers:
            raise NoSuchPair(f"{self.node_id}: no key relationship with pair {key}")
        return self._ledgers[key]

    def sources_for(self, pair: tuple[str, str]) -> list[str]:
        key = pair_key(*pair)
        return [s for s, p in self._sources.items() if p == key]

    # -- operations ------------------------------------------------------------

    def ingest(self, block: KeyBlock) -> str:
        block.validate()
        if block.state is not BlockState.AVAILABLE:
            raise MalformedBlock(f"block {block.key_id}: must be ingested AVAILABLE")
        if block.key_id in self._seen_ids:
            raise DuplicateKeyId(f"{self.node_id}: key_id {block.key_id} already ingested")
        if block.origin not in self._sources:
            raise UnknownSource(f"{self.node_id}: source {block.origin} not registered")
        self._seen_ids.add(block.key_id)
        self._blocks[block.key_id] = block
        fifo = self._source_fifo[block.origin]
        entry = (block.created_at, block.key_id)
        if not fifo or fifo[-1] <= entry:
            fifo.append(entry)
        else:  # out-of-order arrival: keep the FIFO sorted by age
            bisect.insort(fifo, entry)
        stats = self._stats[block.origin]
        stats.ingested_bits += block.bits
        stats.available_bits += block.bits
        heapq.heappush(self._expiry_heap, (block.expires_at, block.key_id))
        return block.key_id

    def reserve(
        self,
        pair: tuple[str, str],
        min_bits: int,
        technology: Technology | None = None,
        source_id: str | None = None,
        key_id: str | None = None,
        enforce_ppk_min: bool = True,
    ) -> PpkRecord:
        """Issue a PPK from one AVAILABLE block of the pair's material.

        Selection is FIFO by (created_at, key_id) over matching sources; a
        specific block may be pinned with *key_id* (used for just-relayed
        end-to-end keys).  The block moves to RESERVED at both stores via the
        shared ledger; the returned ppk is the first ``min_bits`` of it.
        """
        if min_bits <= 0 or min_bits % 8 != 0:
            raise InsufficientKeyMaterial(
                f"requested {min_bits} bits (must be a positive multiple of 8)")
        if enforce_ppk_min and min_bits < MIN_PPK_LEN * 8:
            raise InsufficientKeyMaterial(
                f"ppk must be at least {MIN_PPK_LEN} octets, requested {min_bits} bits")
        ledger = self.ledger_for(pair)
        block = self._pick_block(ledger, pair, min_bits, technology, source_id, key_id)
        ledger.claim(block.key_id)
        ppk_id = ledger.new_ppk_id()
        ppk_len = min_bits // 8
        ledger.issued[ppk_id] = _Issue(ppk_id, block.key_id, ppk_len, self.node_id)
        return PpkRecord(
            ppk_id=ppk_id, ppk=block.key_bytes[:ppk_len], pair=ledger.pair,
            expires_at=block.expires_at, technology=block.technology,
            source=block.origin,
        )

    def _pick_block(self, ledger, pair, min_bits, technology, source_id, key_id) -> KeyBlock:
        if key_id is not None:
            block = self._blocks.get(key_id)
            if block is None or block.state is not BlockState.AVAILABLE \
                    or key_id in ledger.claimed or block.bits < min_bits:
                raise InsufficientKeyMaterial(f"pinned block {key_id} not available")
            return block
        sources = [source_id] if source_id else self.sources_for(pair)
        best: KeyBlock | None = None
        for src in sources:
            if src not in self._source_fifo:
                continue
            if technology is not None and self._source_tech.get(src) not in (None, technology):
                continue
            cand = self._first_candidate(ledger, src, min_bits, technology)
            if cand is not None and (best is None
                                     or (cand.created_at, cand.key_id) < (best.created_at, best.key_id)):
                best = cand
        if best is None:
            what = technology.value if technology else "any technology"
            raise InsufficientKeyMaterial(
                f"{self.node_id}: no AVAILABLE block of >= {min_bits} bits "
                f"({what}) for pair {pair_key(*pair)}"
            )
        return best

    def _first_candidate(self, ledger, src: str, min_bits: int,
                         technology: Technology | None) -> KeyBlock | None:
        """Oldest AVAILABLE unclaimed block of *src*; advances the FIFO cursor
        past permanently retired entries so repeated scans stay amortized O(1)."""
        fifo = self._source_fifo[src]
        head = self._fifo_head[src]
        i = head
        found: KeyBlock | None = None
        while i < len(fifo):
            block = self._blocks[fifo[i][1]]
            retired = (block.state is not BlockState.AVAILABLE
                       or block.key_id in ledger.claimed)
            if retired:
                if i == head:
                    head += 1
                i += 1
                continue
            if (technology is None or block.technology is technology) and block.bits >= min_bits:
                found = block
                break
            i += 1
        self._fifo_head[src] = head
        return found

    def fetch_by_id(self, ppk_id: str) -> PpkRecord:
        """Return the PPK previously issued under *ppk_id*; consumes the block."""
        issue = self._find_issue(ppk_id)
        if issue is None:
            raise UnknownPpkId(f"{self.node_id}: ppk_id {ppk_id} was never issued")
        block = self._blocks.get(issue.key_id)
        if block is None:
            raise UnknownPpkId(f"{self.node_id}: no local copy of block {issue.key_id}")
        if block.state is BlockState.EXPIRED:
            raise KeyExpired(f"{self.node_id}: block {block.key_id} expired")
        if block.state is BlockState.CONSUMED:
            raise KeyAlreadyConsumed(f"{self.node_id}: ppk_id {ppk_id} already consumed here")
        self._transition(block, BlockState.CONSUMED)
        return PpkRecord(
            ppk_id=ppk_id, ppk=block.key_bytes[:issue.ppk_len], pair=self._sources[block.origin],
            expires_at=block.expires_at, technology=block.technology, source=block.origin,
        )

    def destroy_reserved(self, ppk_id: str) -> None:
        """Drop a reserved-but-unfetched issue (e.g. the SA aborted).

        The block is retired, never returned to the pool; accounting counts it
        as consumed.
        """
        issue = self._find_issue(ppk_id)
        if issue is None:
            raise UnknownPpkId(f"{self.node_id}: ppk_id {ppk_id} was never issued")
        block = self._blocks.get(issue.key_id)
        if block is not None and block.state is BlockState.RESERVED:
            self._transition(block, BlockState.CONSUMED)

    def expire_sweep(self, now: float) -> int:
        """Expire every block with expires_at <= now; returns how many."""
        expired = 0
        while self._expiry_heap and self._expiry_heap[0][0] <= now:
            _, kid = heapq.heappop(self._expiry_heap)
            block = self._blocks[kid]
            if block.state in (BlockState.AVAILABLE, BlockState.RESERVED):
                self._transition(block, BlockState.EXPIRED)
                expired += 1
        return expired

    def buffer_level(self, source_id: str) -> BufferStats:
        if source_id not in self._stats:
            raise UnknownSource(f"{self.node_id}: unknown source {source_id}")
        return self._stats[source_id]

    def source_technology(self, source_id: str) -> Technology | None:
        return self._source_tech.get(source_id)

    def available_block_sizes(self, source_id: str) -> list[int]:
        """Sizes (bits) of the AVAILABLE blocks of one source, FIFO order."""
        if source_id not in self._sources:
            raise UnknownSource(f"{self.node_id}: unknown source {source_id}")
        return [
            self._blocks[kid].bits
            for _, kid in self._source_fifo[source_id]
            if self._blocks[kid].state is BlockState.AVAILABLE
        ]

    def pair_available_bits(self, pair: tuple[str, str],
                            technology: Technology | None = None) -> int:
        total = 0
        for src in self.sources_for(pair):
            if technology is not None and self._source_tech.get(src) not in (None, technology):
                continue
            total += self._stats[src].available_bits
        return total

    def draw_consumed(self, source_id: str, bits: int) -> tuple[bytes, list[str]]:
        """Claim and consume exactly *bits* of material from one source (FIFO).

        Used for relay hop keys: the ledger claim reserves the same blocks at
        the peer store; this side consumes its copies immediately and returns
        the concatenated bytes plus the block ids (sent on the wire so the
        peer can consume the same blocks).
        """
        if source_id not in self._sources:
            raise UnknownSource(f"{self.node_id}: unknown source {source_id}")
        ledger = self._ledgers[self._sources[source_id]]
        stats = self._stats[source_id]
        picked: list[KeyBlock] = []
        got = 0
        fifo = self._source_fifo[source_id]
        for i in range(self._fifo_head[source_id], len(fifo)):
            if got >= bits:
                break
            block = self._blocks[fifo[i][1]]
            if block.state is not BlockState.AVAILABLE or block.key_id in ledger.claimed:
                continue
            picked.append(block)
            got += block.bits
        if got != bits:
            raise InsufficientKeyMaterial(
                f"hop {source_id}: need exactly {bits} bits, have {min(got, stats.available_bits)} "
                f"claimable (block-aligned draws only)"
            )
        for block in picked:
            ledger.claim(block.key_id)
            self._transition(block, BlockState.CONSUMED)
        return b"".join(b.key_bytes for b in picked), [b.key_id for b in picked]

    def consume_blocks(self, key_ids: list[str]) -> bytes:
        """Consume the local copies of *key_ids* (the peer side of a hop draw)."""
        out = []
        for kid in key_ids:
            block = self._blocks.get(kid)
            if block is None:
                raise UnknownPpkId(f"{self.node_id}: no block {kid}")
            if block.state is BlockState.CONSUMED:
                raise KeyAlreadyConsumed(f"{self.node_id}: block {kid} already consumed")
            if block.state is BlockState.EXPIRED:
                raise KeyExpired(f"{self.node_id}: block {kid} expired")
            self._transition(block, BlockState.CONSUMED)
            out.append(block.key_bytes)
        return b"".join(out)

    # -- internals ---------------------------------------------------------

    def _find_issue(self, ppk_id: str) -> _Issue | None:
        for ledger in set(self._ledgers.values()):
            issue = ledger.issued.get(ppk_id)
            if issue is not None:
                return issue
        return None

    def _mark_reserved(self, key_id: str) -> None:
        block = self._blocks.get(key_id)
        if block is not None and block.state is BlockState.AVAILABLE:
            self._transition(block, BlockState.RESERVED)

    def _transition(self, block: KeyBlock, new_state: BlockState) -> None:
        old = block.state
        allowed = {
            BlockState.AVAILABLE: {BlockState.RESERVED, BlockState.CONSUMED, BlockState.EXPIRED},
            BlockState.RESERVED: {BlockState.CONSUMED, BlockState.EXPIRED},
            BlockState.CONSUMED: set(),
            BlockState.EXPIRED: set(),
        }
        if new_state not in allowed[old]:
            raise KeyAlreadyConsumed(f"illegal transition {old.value} -> {new_state.value}")
        stats = self._stats[block.origin]
        bucket = {
            BlockState.AVAILABLE: "available_bits",
            BlockState.RESERVED: "reserved_bits",
            BlockState.CONSUMED: "consumed_bits",
            BlockState.EXPIRED: "expired_bits",
        }
        setattr(stats, bucket[old], getattr(stats, bucket[old]) - block.bits)
        setattr(stats, bucket[new_state], getattr(stats, bucket[new_state]) + block.bits)
        block.state = new_state

    def recount(self) -> dict[str, BufferStats]:
        """Brute-force accounting rebuild (an oracle for the incremental stats)."""
        fresh: dict[str, BufferStats] = {
            src: BufferStats(src, threshold_bits=st.threshold_bits)
            for src, st in self._stats.items()
        }
        for block in self._blocks.values():
            stats = fresh[block.origin]
            stats.ingested_bits += block.bits
            field_name = {
                BlockState.AVAILABLE: "available_bits",
                BlockState.RESERVED: "reserved_bits",
                BlockState.CONSUMED: "consumed_bits",
                BlockState.EXPIRED: "expired_bits",
            }[block.state]
            setattr(stats, field_name, getattr(stats, field_name) + block.bits)
        return fresh

    def check_conservation(self) -> None:
        recounted = self.recount()
        for src, stats in self._stats.items():
            if not stats.conserved():
                raise KeyAlreadyConsumed(
                    f"{self.node_id}/{src}: accounting not conserved: {stats}"
                )
            ref = recounted[src]
            if (ref.available_bits, ref.reserved_bits, ref.consumed_bits,
                    ref.expired_bits) != (stats.available_bits, stats.reserved_bits,
                                          stats.consumed_bits, stats.expired_bits):
                raise KeyAlreadyConsumed(
                    f"{self.node_id}/{src}: incremental stats diverge from recount"
                )
