"""Shared fixtures: small two/three-node rigs for module-level tests."""

from __future__ import annotations

import hashlib
import random

import pytest

from qsvpnsim.keystore import KeyBlock, KeyStore, PairLedger, Technology


def hmac_sha512_oracle(key: bytes, message: bytes) -> bytes:
    """Independent HMAC-SHA-512 built from the ipad/opad definition.

    Deliberately avoids the hmac module used by the implementation.
    """
    block = 128
    if len(key) > block:
        key = hashlib.sha512(key).digest()
    key = key + bytes(block - len(key))
    ipad = bytes(b ^ 0x36 for b in key)
    opad = bytes(b ^ 0x5C for b in key)
    inner = hashlib.sha512(ipad + message).digest()
    return hashlib.sha512(opad + inner).digest()


def kdf_oracle(secret: bytes, context: bytes, out_bits: int) -> bytes:
    """Independent counter-mode expansion matching the documented scheme."""
    out_len = out_bits // 8
    blocks = b""
    counter = 1
    while len(blocks) < out_len:
        blocks += hmac_sha512_oracle(secret, context + counter.to_bytes(4, "big"))
        counter += 1
    return blocks[:out_len]


def make_block(key_id: str, source: str, nbytes: int = 32, created: float = 0.0,
               lifetime: float = 1000.0, tech: Technology = Technology.CV_QKD,
               fill: bytes | None = None) -> KeyBlock:
    body = fill if fill is not None else hashlib.sha256(key_id.encode()).digest()
    key_bytes = (body * ((nbytes // len(body)) + 1))[:nbytes]
    return KeyBlock(key_id=key_id, key_bytes=key_bytes, origin=source,
                    technology=tech, created_at=created,
                    expires_at=created + lifetime)


@pytest.fixture
def pair_rig():
    """Two synchronized stores sharing a ledger, one QKD-style source."""
    pair = ("alice", "bob")
    ledger = PairLedger(pair)
    store_a = KeyStore("alice")
    store_b = KeyStore("bob")
    for store in (store_a, store_b):
        store.register_pair(pair, ledger)
        store.register_source("link-1", pair, technology=Technology.CV_QKD)
    return store_a, store_b, ledger


@pytest.fixture
def rng():
    return random.Random(0xC0FFEE)
