"""Counter-based splittable randomness.

Every stochastic decision in the package draws from a generator derived
from (root seed, round index, purpose tag), so replays are bitwise
reproducible and no global stream is threaded through call sites.
"""

from __future__ import annotations

import zlib

import numpy as np

# purpose tags; stable small ints so derived streams never collide
EVI_INIT = 1
BERNOULLI = 2
NATURE = 3
AUDIT = 4
SELF_PLAY = 5


def _tag_to_int(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    if isinstance(tag, str):
        return zlib.crc32(tag.encode("utf-8"))
    raise TypeError(f"rng tag must be int or str, got {type(tag)!r}")


def derive_rng(root_seed: int, *tags) -> np.random.Generator:
    """Generator keyed by (root_seed, *tags); pure function of its arguments."""
    entropy = (int(root_seed),) + tuple(_tag_to_int(t) for t in tags)
    return np.random.default_rng(np.random.SeedSequence(entropy))
