"""Deterministic random-stream derivation.

Every stochastic choice in the library draws from a Generator derived from a
tuple of key fields (seed, purpose tag, indices, ...). Streams are therefore
independent of batching, worker scheduling, and call order, and two runs with
the same keys are bit-identical.

The derivation is SHA-256 over a canonical encoding of the key fields, whose
first 16 bytes key a Philox-4x64-10 counter-based generator. The algorithm
identifier below is persisted in checkpoints so a stream can be reproduced
outside this codebase.
"""

from __future__ import annotations

import hashlib

import numpy as np

PRNG_ALGORITHM = "sha256/philox4x64-10/numpy-generator-v1"


def _encode_field(field) -> bytes:
    if isinstance(field, bool):
        return b"b" + (b"1" if field else b"0")
    if isinstance(field, (int, np.integer)):
        return b"i" + str(int(field)).encode("ascii")
    if isinstance(field, str):
        return b"s" + field.encode("utf-8")
    if isinstance(field, (float, np.floating)):
        return b"f" + np.float64(field).tobytes()
    raise TypeError(f"unsupported rng key field type: {type(field)!r}")


def derive_key(*fields) -> int:
    """Hash key fields into a 128-bit Philox key."""
    h = hashlib.sha256()
    for field in fields:
        enc = _encode_field(field)
        h.update(len(enc).to_bytes(4, "little"))
        h.update(enc)
    return int.from_bytes(h.digest()[:16], "little")


def derive_rng(*fields) -> np.random.Generator:
    """Return a Generator for the stream named by the key fields."""
    return np.random.Generator(np.random.Philox(key=derive_key(*fields)))
