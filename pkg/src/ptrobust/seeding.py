"""Stable seed derivation for order-independent, per-item RNG streams."""

from __future__ import annotations

import hashlib


def stable_seed(*parts: object) -> int:
    """Derive a 64-bit seed from the given parts, stable across platforms
    and process restarts (unlike builtin hash)."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "big")


def stable_key128(*parts: object) -> int:
    """128-bit variant, used to key counter-based bit generators."""
    payload = "\x1f".join(str(p) for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(payload, digest_size=16).digest(), "big")
