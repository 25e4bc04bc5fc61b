"""
Reproducible random streams.

Every stream is a Philox generator whose SeedSequence is keyed by
(master seed, scenario key, replicate, trial), so results never depend
on worker count or scheduling order.
"""

import hashlib
import json
from typing import Any, Mapping

import numpy as np


def canonical_json(obj: Any) -> str:
    """Key-sorted compact JSON used for hashing and config echo."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=float)


def scenario_id(factors: Mapping[str, Any]) -> str:
    """First 16 hex digits of SHA-256 over the canonical factor JSON."""
    return hashlib.sha256(canonical_json(dict(factors)).encode("utf-8")).hexdigest()[:16]


def scenario_key(sid: str) -> int:
    """Integer form of a scenario id for use in a SeedSequence spawn key."""
    return int(sid, 16)


def make_stream(master_seed: int, *key: int) -> np.random.Generator:
    """
    Counter-based substream for the given key path.

    Args:
        master_seed: Run seed (never derived from the clock)
        *key: Non-negative integers, e.g. (scenario_key, replicate, trial)

    Returns:
        Independent numpy Generator backed by Philox
    """
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


# spawn-key slot reserved for second-stage bootstrap draws
BOOTSTRAP_SLOT = 2 ** 32 - 1
