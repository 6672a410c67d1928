"""Symmetric primitives shared by the key plane.

The pseudorandom function used throughout is HMAC-SHA-512, matching the
``prf sha512`` proposal negotiated by the routers.  Key expansion is
counter-mode PRF output; deterministic byte streams for simulated key
material come from SHAKE-256 so they are a pure function of their inputs.
"""

from __future__ import annotations

import hashlib
import hmac

from .errors import BadLength

PRF_NAME = "HMAC-SHA-512"
PRF_OUTPUT_LEN = 64


def prf(key: bytes, message: bytes) -> bytes:
    """HMAC-SHA-512 of *message* under *key* (64 octets)."""
    return hmac.new(key, message, hashlib.sha512).digest()


def prf_tag(key: bytes, *parts: bytes | str, n: int = 16) -> bytes:
    """Short authentication tag over the concatenation of *parts*."""
    joined = b"\x1f".join(p.encode() if isinstance(p, str) else p for p in parts)
    return prf(key, joined)[:n]


def kdf_expand(secret: bytes, context: bytes | str, out_bits: int) -> bytes:
    """Counter-mode PRF expansion of *secret* into ``out_bits`` of key material.

    Output block i is ``PRF(secret, context || uint32_be(i))`` with i starting
    at 1; blocks are concatenated and truncated to the requested length.
    """
    if out_bits <= 0 or out_bits % 8 != 0:
        raise BadLength(f"out_bits must be a positive multiple of 8, got {out_bits}")
    if isinstance(context, str):
        context = context.encode()
    out_len = out_bits // 8
    blocks = []
    counter = 1
    while sum(len(b) for b in blocks) < out_len:
        blocks.append(prf(secret, context + counter.to_bytes(4, "big")))
        counter += 1
    return b"".join(blocks)[:out_len]


def prf_stream(label: bytes | str, data: bytes | str, n: int) -> bytes:
    """Deterministic byte stream: SHAKE-256(label || 0x00 || data), n octets."""
    if isinstance(label, str):
        label = label.encode()
    if isinstance(data, str):
        data = data.encode()
    return hashlib.shake_256(label + b"\x00" + data).digest(n)


def xor_bytes(a: bytes, b: bytes) -> bytes:
    if len(a) != len(b):
        raise BadLength(f"xor operands differ in length: {len(a)} vs {len(b)}")
    return bytes(x ^ y for x, y in zip(a, b))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
