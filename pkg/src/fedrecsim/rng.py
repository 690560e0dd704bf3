"""Seeded random-number substreams.

All randomness in a run flows from a single root seed. Each stochastic
component (init, negative sampling, per-round user selection, ...) draws
from its own named substream, so adding or removing draws in one component
never perturbs another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_entropy(label) -> int:
    digest = hashlib.blake2b(repr(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def substream(root_seed: int, *labels) -> np.random.Generator:
    """Return a generator for the substream named by `labels`.

    The same (root_seed, labels) pair always yields an identical stream,
    on any platform. Labels may mix strings and integers, e.g.
    ``substream(seed, "round", 17)``.
    """
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    entropy.extend(_label_entropy(lab) for lab in labels)
    return np.random.default_rng(np.random.SeedSequence(entropy))
