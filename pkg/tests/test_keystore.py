"""Key store lifecycle, accounting conservation, pair synchronization."""

import random

import pytest

from conftest import make_block
from qsvpnsim.errors import (
    DuplicateKeyId,
    InsufficientKeyMaterial,
    KeyAlreadyConsumed,
    MalformedBlock,
    NoSuchPair,
    UnknownPpkId,
    UnknownSource,
)
from qsvpnsim.keystore import BlockState, KeyBlock, KeyStore, PairLedger, Technology

PAIR = ("alice", "bob")


class TestIngest:
    def test_ingest_increases_available_bits(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1", nbytes=32))
        assert store.buffer_level("link-1").available_bits == 256

    def test_expiry_before_creation_rejected(self, pair_rig):
        store, _, _ = pair_rig
        block = make_block("k1", "link-1", created=10.0, lifetime=-5.0)
        with pytest.raises(MalformedBlock):
            store.ingest(block)

    def test_empty_bytes_rejected(self, pair_rig):
        store, _, _ = pair_rig
        block = make_block("k1", "link-1")
        block.key_bytes = b""
        with pytest.raises(MalformedBlock):
            store.ingest(block)

    def test_duplicate_key_id_rejected(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        with pytest.raises(DuplicateKeyId):
            store.ingest(make_block("k1", "link-1"))

    def test_key_id_never_reissued_even_after_consumption(self, pair_rig):
        store_a, _, _ = pair_rig
        store_a.ingest(make_block("k1", "link-1"))
        rec = store_a.reserve(PAIR, 256)
        store_a.fetch_by_id(rec.ppk_id)
        with pytest.raises(DuplicateKeyId):
            store_a.ingest(make_block("k1", "link-1"))

    def test_unknown_source_rejected(self, pair_rig):
        store, _, _ = pair_rig
        with pytest.raises(UnknownSource):
            store.ingest(make_block("k1", "unregistered"))


class TestReserve:
    def test_empty_store_insufficient(self, pair_rig):
        store, _, _ = pair_rig
        with pytest.raises(InsufficientKeyMaterial):
            store.reserve(PAIR, 256)

    def test_unknown_pair(self, pair_rig):
        store, _, _ = pair_rig
        with pytest.raises(NoSuchPair):
            store.reserve(("alice", "mallory"), 256)

    def test_two_reserves_distinct_ids(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        store.ingest(make_block("k2", "link-1"))
        first = store.reserve(PAIR, 256)
        second = store.reserve(PAIR, 256)
        assert first.ppk_id != second.ppk_id

    def test_fifo_oldest_first_with_lexicographic_tiebreak(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k-late", "link-1", created=5.0))
        store.ingest(make_block("k-b", "link-1", created=1.0))
        store.ingest(make_block("k-a", "link-1", created=1.0))
        rec = store.reserve(PAIR, 256)
        issue = store._find_issue(rec.ppk_id)
        assert issue.key_id == "k-a"

    def test_reserve_moves_block_to_reserved_at_both_stores(self, pair_rig):
        store_a, store_b, _ = pair_rig
        block = make_block("k1", "link-1")
        store_a.ingest(block)
        store_b.ingest(make_block("k1", "link-1"))
        store_a.reserve(PAIR, 256)
        assert store_a._blocks["k1"].state is BlockState.RESERVED
        assert store_b._blocks["k1"].state is BlockState.RESERVED

    def test_peer_fetch_returns_identical_octets(self, pair_rig):
        # both stores fed the same simulated link stream
        store_a, store_b, _ = pair_rig
        rng = random.Random(11)
        for i in range(20):
            fill = rng.randbytes(32)
            store_a.ingest(make_block(f"k{i:03d}", "link-1", fill=fill))
            store_b.ingest(make_block(f"k{i:03d}", "link-1", fill=fill))
        for _ in range(20):
            rec = store_a.reserve(PAIR, 256)
            peer = store_b.fetch_by_id(rec.ppk_id)
            assert peer.ppk == rec.ppk

    def test_ppk_shorter_than_sixteen_octets_rejected(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        with pytest.raises(InsufficientKeyMaterial):
            store.reserve(PAIR, 64)

    def test_technology_filter(self, pair_rig):
        store_a, _, _ = pair_rig
        store_a.register_source("pqc-pool", PAIR, technology=Technology.PQC_KEM)
        store_a.ingest(make_block("q1", "link-1", tech=Technology.CV_QKD))
        store_a.ingest(make_block("p1", "pqc-pool", tech=Technology.PQC_KEM))
        rec = store_a.reserve(PAIR, 256, technology=Technology.PQC_KEM)
        assert rec.technology is Technology.PQC_KEM
        assert rec.source == "pqc-pool"


class TestFetch:
    def test_fetch_after_reserve_same_bytes_consumed(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        rec = store.reserve(PAIR, 256)
        fetched = store.fetch_by_id(rec.ppk_id)
        assert fetched.ppk == rec.ppk
        assert store._blocks["k1"].state is BlockState.CONSUMED

    def test_double_fetch_rejected(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        rec = store.reserve(PAIR, 256)
        store.fetch_by_id(rec.ppk_id)
        with pytest.raises(KeyAlreadyConsumed):
            store.fetch_by_id(rec.ppk_id)

    def test_unknown_id_rejected(self, pair_rig):
        store, _, _ = pair_rig
        with pytest.raises(UnknownPpkId):
            store.fetch_by_id("deadbeef")

    def test_destroyed_reservation_never_returns(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1"))
        rec = store.reserve(PAIR, 256)
        store.destroy_reserved(rec.ppk_id)
        with pytest.raises(KeyAlreadyConsumed):
            store.fetch_by_id(rec.ppk_id)


class TestExpiry:
    def test_no_expired_blocks_returns_zero(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1", lifetime=100.0))
        assert store.expire_sweep(now=50.0) == 0

    def test_three_of_five_expired_with_brute_force_recount(self, pair_rig):
        store, _, _ = pair_rig
        for i, lifetime in enumerate([10.0, 20.0, 30.0, 200.0, 300.0]):
            store.ingest(make_block(f"k{i}", "link-1", lifetime=lifetime))
        expired = store.expire_sweep(now=50.0)
        assert expired == 3
        # independent recount by scanning every block
        alive = sum(b.bits for b in store._blocks.values()
                    if b.state is BlockState.AVAILABLE)
        assert store.buffer_level("link-1").available_bits == alive == 2 * 256

    def test_sweep_idempotent(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1", lifetime=10.0))
        assert store.expire_sweep(now=50.0) == 1
        assert store.expire_sweep(now=50.0) == 0

    def test_expired_block_cannot_be_fetched(self, pair_rig):
        store, _, _ = pair_rig
        store.ingest(make_block("k1", "link-1", lifetime=10.0))
        rec = store.reserve(PAIR, 256)
        store.expire_sweep(now=50.0)
        from qsvpnsim.errors import KeyExpired
        with pytest.raises(KeyExpired):
            store.fetch_by_id(rec.ppk_id)


class TestBufferLevel:
    def test_seven_blocks_of_256_bits(self, pair_rig):
        store, _, _ = pair_rig
        for i in range(7):
            store.ingest(make_block(f"k{i}", "link-1"))
        assert store.buffer_level("link-1").available_bits == 7 * 256

    def test_reserved_bits_after_one_reserve(self, pair_rig):
        store, _, _ = pair_rig
        for i in range(3):
            store.ingest(make_block(f"k{i}", "link-1"))
        store.reserve(PAIR, 256)
        stats = store.buffer_level("link-1")
        assert stats.reserved_bits == 256
        assert stats.available_bits == 2 * 256

    def test_unknown_source(self, pair_rig):
        store, _, _ = pair_rig
        with pytest.raises(UnknownSource):
            store.buffer_level("nope")


class TestConservationProperty:
    def test_random_operation_sequences_conserve_bits(self, pair_rig):
        """Brute-force replay: every interleaving keeps the accounting exact."""
        store_a, store_b, _ = pair_rig
        rng = random.Random(99)
        issued = []
        now = 0.0
        ingested = 0
        for step in range(1000):
            action = rng.random()
            now += rng.random() * 10
            if action < 0.45:
                kid = f"k{step:05d}"
                fill = rng.randbytes(32)
                for store in (store_a, store_b):
                    store.ingest(KeyBlock(
                        key_id=kid, key_bytes=fill, origin="link-1",
                        technology=Technology.CV_QKD, created_at=now,
                        expires_at=now + rng.choice([50.0, 5000.0])))
                ingested += 256
            elif action < 0.7:
                try:
                    issued.append(store_a.reserve(PAIR, 256).ppk_id)
                except InsufficientKeyMaterial:
                    pass
            elif action < 0.9 and issued:
                ppk_id = issued.pop(rng.randrange(len(issued)))
                try:
                    a = store_a.fetch_by_id(ppk_id)
                    b = store_b.fetch_by_id(ppk_id)
                    assert a.ppk == b.ppk
                except (KeyAlreadyConsumed, Exception):
                    pass
            else:
                store_a.expire_sweep(now)
                store_b.expire_sweep(now)
        for store in (store_a, store_b):
            store.check_conservation()
            stats = store.buffer_level("link-1")
            assert stats.ingested_bits == ingested
            assert stats.conserved()


class TestHopDraws:
    def test_draw_consumed_exact_bits_both_ends_accounting(self, pair_rig):
        store_a, store_b, _ = pair_rig
        for i in range(4):
            fill = bytes([i]) * 32
            store_a.ingest(make_block(f"k{i}", "link-1", fill=fill))
            store_b.ingest(make_block(f"k{i}", "link-1", fill=fill))
        key_bytes, ids = store_a.draw_consumed("link-1", 512)
        assert len(key_bytes) == 64 and ids == ["k0", "k1"]
        # peer consumes the same blocks by id and sees the same bytes
        assert store_b.consume_blocks(ids) == key_bytes
        for store in (store_a, store_b):
            assert store.buffer_level("link-1").available_bits == 2 * 256

    def test_draw_requires_block_alignment(self, pair_rig):
        store_a, _, _ = pair_rig
        store_a.ingest(make_block("k0", "link-1"))
        with pytest.raises(InsufficientKeyMaterial):
            store_a.draw_consumed("link-1", 384)
