"""Canonical serialization and digests.

Cache keys and reproducible identifiers hash a canonical JSON form:
keys sorted, no whitespace, floats rendered with the shortest decimal
that round-trips (CPython's repr, which json reuses), and negative
zero normalized so 0.0 and -0.0 collide.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np


def _normalize(obj: Any) -> Any:
    # exact-type dispatch first; this function sits on the cache-key path
    t = type(obj)
    if t is str:
        return obj
    if t is float:
        # +0.0 folds -0.0 into 0.0 and leaves every other value alone.
        return obj + 0.0
    if t is dict:
        return {str(k): _normalize(v) for k, v in obj.items()}
    if t is bool or t is int:
        return obj
    if t is list or t is tuple:
        return [_normalize(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) + 0.0
    if obj is None or isinstance(obj, str):
        return obj
    if isinstance(obj, dict):
        return {str(k): _normalize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_normalize(v) for v in obj]
    raise TypeError(f"value {obj!r} of type {type(obj).__name__} has no canonical form")


def canonical_json(obj: Any) -> str:
    """Render `obj` as deterministic, key-sorted, compact JSON."""
    return json.dumps(_normalize(obj), sort_keys=True, separators=(",", ":"))


def digest128(text: str) -> str:
    """128-bit hex digest of a canonical string."""
    return hashlib.blake2b(text.encode("utf-8"), digest_size=16).hexdigest()


def digest128_int(text: str) -> int:
    """Digest as an integer, usable as an RNG seed component."""
    return int(digest128(text), 16)
