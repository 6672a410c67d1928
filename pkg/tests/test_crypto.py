"""PRF / KDF checks against an independent HMAC-SHA-512 oracle."""

import random

import pytest

from conftest import hmac_sha512_oracle, kdf_oracle
from qsvpnsim.crypto import kdf_expand, prf, prf_stream, xor_bytes
from qsvpnsim.errors import BadLength

# HMAC-SHA-512(key = 32 x 0x00, msg = 64 x 0x01), recomputed from the
# ipad/opad definition before being frozen here.
PINNED_ZERO_ONE = (
    "13abd61409afc131985ea8342d9a8e6469ca7e757525b21b360516961f18cf94"
    "4b20f112eb410e4168a8f25ed010ec598b79b93a792a7324fbebeac7e3874bff"
)


class TestPrf:
    def test_pinned_zero_one_vector(self):
        assert prf(bytes(32), b"\x01" * 64).hex() == PINNED_ZERO_ONE

    def test_matches_oracle_on_random_inputs(self):
        rng = random.Random(1)
        for _ in range(300):
            key = rng.randbytes(rng.randrange(16, 64))
            msg = rng.randbytes(rng.randrange(0, 128))
            assert prf(key, msg) == hmac_sha512_oracle(key, msg)

    def test_output_length(self):
        assert len(prf(b"k", b"m")) == 64


class TestKdfExpand:
    def test_deterministic(self):
        a = kdf_expand(b"secret", "ctx", 1024)
        b = kdf_expand(b"secret", "ctx", 1024)
        assert a == b

    def test_matches_independent_oracle(self):
        rng = random.Random(2)
        for _ in range(50):
            secret = rng.randbytes(32)
            context = rng.randbytes(rng.randrange(1, 40))
            bits = 8 * rng.randrange(1, 200)
            assert kdf_expand(secret, context, bits) == kdf_oracle(secret, context, bits)

    def test_distinct_contexts_distinct_output(self):
        assert kdf_expand(b"s", "ctx-a", 256) != kdf_expand(b"s", "ctx-b", 256)

    def test_zero_bits_rejected(self):
        with pytest.raises(BadLength):
            kdf_expand(b"s", "ctx", 0)

    def test_non_octet_bits_rejected(self):
        with pytest.raises(BadLength):
            kdf_expand(b"s", "ctx", 12)

    def test_truncation_is_prefix(self):
        long = kdf_expand(b"s", "ctx", 1024)
        short = kdf_expand(b"s", "ctx", 256)
        assert long[:32] == short


class TestHelpers:
    def test_prf_stream_pure_function(self):
        assert prf_stream(b"label", "data", 64) == prf_stream(b"label", "data", 64)
        assert prf_stream(b"label", "data", 64) != prf_stream(b"other", "data", 64)

    def test_xor_roundtrip(self):
        a, b = b"\x01\x02\x03", b"\xff\x00\x10"
        assert xor_bytes(xor_bytes(a, b), b) == a

    def test_xor_length_mismatch(self):
        with pytest.raises(BadLength):
            xor_bytes(b"ab", b"abc")
