"""
Seeding helpers - derive independent deterministic streams from one base seed
"""
import hashlib
import json
from typing import Any

import numpy as np


def derive_seed(base: int, *keys: int) -> int:
    """
    Derive a 63-bit seed from a base seed and integer keys.

    The result depends only on (base, keys), never on call order, so shards
    evaluated in any order or thread get the same stream.
    """
    sequence = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(sequence.generate_state(1, dtype=np.uint64)[0]) >> 1


def make_rng(base: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *keys))


def config_hash(payload: Any) -> str:
    """First 16 hex digits of SHA-256 over canonical JSON"""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]
