"""Synthetic long-tail interaction generator.

Item popularity follows a Zipf law: item j is drawn with probability
proportional to (j + 1) ** -exponent, so low item ids are the popular head.
Each user receives a fixed number of distinct items; timestamps are
sequential in draw order, which makes the last-drawn item the leave-one-out
test item downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionRecord
from .errors import ConfigError
from .rng import substream


@dataclass(frozen=True)
class SyntheticSpec:
    num_users: int
    num_items: int
    zipf_exponent: float
    interactions_per_user: int
    seed: int = 0


def zipf_weights(num_items: int, exponent: float) -> np.ndarray:
    if exponent <= 0:
        raise ConfigError(f"zipf exponent must be > 0, got {exponent}")
    w = (np.arange(1, num_items + 1, dtype=np.float64)) ** (-exponent)
    return w / w.sum()


def generate_synthetic(spec: SyntheticSpec) -> list:
    """Generate interaction records for the spec (deterministic in the seed)."""
    if spec.interactions_per_user > spec.num_items:
        raise ConfigError(
            f"interactions_per_user={spec.interactions_per_user} exceeds "
            f"num_items={spec.num_items}"
        )
    if spec.num_users < 1 or spec.num_items < 1:
        raise ConfigError("num_users and num_items must be positive")
    weights = zipf_weights(spec.num_items, spec.zipf_exponent)
    records = []
    for uid in range(spec.num_users):
        rng = substream(spec.seed, "synthetic", uid)
        items = rng.choice(
            spec.num_items, size=spec.interactions_per_user, replace=False, p=weights
        )
        for ts, item in enumerate(items):
            records.append(InteractionRecord(uid, int(item), 1.0, ts))
    return records


def true_popularity(records, num_items: int) -> np.ndarray:
    """Ground-truth interaction counts per item (for mining-recall checks)."""
    counts = np.zeros(num_items, dtype=np.int64)
    for rec in records:
        counts[rec.item_id] += 1
    return counts
