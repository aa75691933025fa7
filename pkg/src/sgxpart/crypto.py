"""Simulation-grade symmetric primitives.

Everything is built from SHA-256/HMAC so runs are fully deterministic and
dependency-free.  The point of the simulator is where secrets live, not
cipher strength: the stream cipher below is a keyed-hash keystream with an
HMAC tag and must not be reused outside this package.
"""

from __future__ import annotations

import hashlib
import hmac

KEY_LEN = 32
TAG_LEN = 16


def digest(*parts: bytes) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part)
    return h.digest()


def kdf(key: bytes, label: str, *parts: bytes) -> bytes:
    """Derive a 32-byte key from ``key`` bound to a label and inputs.

    Inputs are length-prefixed so distinct splits never collide.
    """
    msg = label.encode() + b"\x00"
    for part in parts:
        msg += len(part).to_bytes(4, "big") + part
    return hmac.new(key, msg, hashlib.sha256).digest()


def mac(key: bytes, *parts: bytes) -> bytes:
    h = hmac.new(key, digestmod=hashlib.sha256)
    for part in parts:
        h.update(part)
    return h.digest()


def keystream(key: bytes, nonce: bytes, length: int) -> bytes:
    out = b""
    block = 0
    while len(out) < length:
        out += hashlib.sha256(key + nonce + block.to_bytes(8, "big")).digest()
        block += 1
    return out[:length]


def ae_encrypt(key: bytes, nonce: bytes, plaintext: bytes) -> bytes:
    """Encrypt-then-MAC: returns ciphertext followed by a 16-byte tag."""
    stream = keystream(key, nonce, len(plaintext))
    ct = bytes(p ^ s for p, s in zip(plaintext, stream))
    tag = mac(key, b"tag", nonce, ct)[:TAG_LEN]
    return ct + tag


def ae_decrypt(key: bytes, nonce: bytes, blob: bytes) -> bytes:
    """Inverse of :func:`ae_encrypt`.  Raises ValueError on a bad tag."""
    if len(blob) < TAG_LEN:
        raise ValueError("ciphertext shorter than tag")
    ct, tag = blob[:-TAG_LEN], blob[-TAG_LEN:]
    expect = mac(key, b"tag", nonce, ct)[:TAG_LEN]
    if not hmac.compare_digest(tag, expect):
        raise ValueError("authentication tag mismatch")
    stream = keystream(key, nonce, len(ct))
    return bytes(c ^ s for c, s in zip(ct, stream))
