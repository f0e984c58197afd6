"""Small shared helpers: seed derivation, canonical hashing, float blobs."""

import hashlib
import json

import numpy as np

_SEED_MOD = 2**31 - 1


def derive_seed(*parts) -> int:
    """Derive a stable sub-seed from a tuple of ints/strings.

    Used to key per-step and per-view RNG streams so that every random
    choice in a run is a pure function of (run seed, position in the run).
    """
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest()[:8], "little") % _SEED_MOD


def canonical_json(obj) -> str:
    """JSON with sorted keys and fixed separators, for hashing and byte-stable files."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def to_f32_bytes(arr: np.ndarray) -> bytes:
    """Little-endian float32 bytes of an array, C order."""
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def from_f32_bytes(buf: bytes, shape) -> np.ndarray:
    arr = np.frombuffer(buf, dtype="<f4")
    expected = int(np.prod(shape)) if len(shape) else 1
    if arr.size != expected:
        raise ValueError(f"blob size {arr.size} does not match shape {tuple(shape)}")
    return arr.reshape(shape).copy()
