"""Interaction-log ingestion and per-user train/test preparation.

The loader accepts MovieLens-style logs (one interaction per line, fields
``user item rating timestamp`` separated by a tab or by ``::``).  Ratings
are binarized: every record counts as a positive, implicit-feedback style.

`build_dataset` applies the leave-one-out protocol: for each user the
positive with the largest timestamp is held out as the test item (timestamp
ties broken by the larger item id), the remaining positives form the
training set, and uninteracted items are sampled as fixed negatives at a
ratio ``q`` of the training-positive count.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataFormatError
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    rating: float
    timestamp: int


@dataclass
class LoadResult:
    """Parsed interaction log with compacted contiguous ids."""

    records: list
    user_ids: list   # compact index -> original id
    item_ids: list   # compact index -> original id

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)


def load_interactions(path, fmt: str = "tab_separated") -> LoadResult:
    """Parse an interaction log file into records with 0-based compact ids.

    Raises DataFormatError on malformed lines (naming the line number) and
    on an empty file; I/O errors propagate as OSError.
    """
    if fmt != "tab_separated":
        raise ConfigError(f"unknown interaction format: {fmt!r}")
    raw = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split("::") if "::" in line else line.split("\t")
            if len(fields) < 4:
                # some exports use spaces; accept any whitespace as a fallback
                fields = line.split()
            if len(fields) < 4:
                raise DataFormatError(
                    f"{path}: line {lineno}: expected >= 4 fields, got {len(fields)}"
                )
            try:
                user = int(fields[0])
                item = int(fields[1])
                rating = float(fields[2])
                ts = int(float(fields[3]))
            except ValueError as exc:
                raise DataFormatError(f"{path}: line {lineno}: {exc}") from exc
            raw.append((user, item, rating, ts))
    if not raw:
        raise DataFormatError(f"{path}: no records")

    user_ids = sorted({r[0] for r in raw})
    item_ids = sorted({r[1] for r in raw})
    user_map = {u: i for i, u in enumerate(user_ids)}
    item_map = {v: j for j, v in enumerate(item_ids)}
    records = [
        InteractionRecord(user_map[u], item_map[v], rating, ts)
        for (u, v, rating, ts) in raw
    ]
    return LoadResult(records=records, user_ids=user_ids, item_ids=item_ids)


@dataclass
class InteractionDataset:
    """Immutable per-user training/test structure shared by all clients.

    train_pos[i], train_neg[i] are sorted int arrays; test_item[i] is the
    held-out item.  Invariants: per user, positives, negatives and the test
    item are pairwise disjoint, and |train_neg| = round(q * |train_pos|)
    (capped by the number of available uninteracted items).
    """

    num_users: int
    num_items: int
    q: float
    train_pos: list = field(repr=False)
    train_neg: list = field(repr=False)
    test_item: np.ndarray = field(repr=False)
    item_popularity: np.ndarray = field(repr=False)  # training-positive counts
    retained_user_ids: list = field(default=None, repr=False)

    _pos_mask: np.ndarray = field(default=None, repr=False, compare=False)

    def train_items(self, user: int) -> np.ndarray:
        """All items in the user's private training set (positives first)."""
        return np.concatenate([self.train_pos[user], self.train_neg[user]])

    def train_labels(self, user: int) -> np.ndarray:
        n_pos = len(self.train_pos[user])
        n_neg = len(self.train_neg[user])
        return np.concatenate([np.ones(n_pos), np.zeros(n_neg)])

    def pos_mask(self) -> np.ndarray:
        """Boolean (num_users, num_items) matrix of training positives."""
        if self._pos_mask is None:
            mask = np.zeros((self.num_users, self.num_items), dtype=bool)
            for i, pos in enumerate(self.train_pos):
                mask[i, pos] = True
            object.__setattr__(self, "_pos_mask", mask)
        return self._pos_mask


def build_dataset(records, num_items=None, q: float = 1.0, seed: int = 0) -> InteractionDataset:
    """Build the leave-one-out dataset from interaction records.

    Users with fewer than two distinct positives are dropped (leave-one-out
    would leave them without training data); a warning names how many.
    Negative sets are drawn once, seeded per user, and never resampled.
    """
    if q <= 0:
        raise ConfigError(f"negative-sampling ratio q must be > 0, got {q}")
    if hasattr(records, "records"):  # accept a LoadResult directly
        records = records.records

    by_user: dict = {}
    for rec in records:
        # duplicate (user, item) pairs keep the latest timestamp
        slot = by_user.setdefault(rec.user_id, {})
        prev = slot.get(rec.item_id)
        if prev is None or rec.timestamp > prev:
            slot[rec.item_id] = rec.timestamp
    if num_items is None:
        num_items = 1 + max(rec.item_id for rec in records)

    retained, dropped = [], 0
    for uid in sorted(by_user):
        if len(by_user[uid]) >= 2:
            retained.append(uid)
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d user(s) with a single interaction", dropped)
    if not retained:
        raise DataFormatError("no user has >= 2 interactions; nothing to build")

    train_pos, train_neg, test_items = [], [], []
    all_items = np.arange(num_items)
    for new_uid, uid in enumerate(retained):
        items = by_user[uid]
        # test item: largest timestamp, ties broken by larger item id
        test = max(items, key=lambda j: (items[j], j))
        pos = np.array(sorted(j for j in items if j != test), dtype=np.int64)
        interacted = np.zeros(num_items, dtype=bool)
        interacted[pos] = True
        interacted[test] = True
        candidates = all_items[~interacted]
        want = int(math.floor(q * len(pos) + 0.5))
        if want > len(candidates):
            log.warning(
                "user %d: only %d uninteracted items for %d requested negatives",
                uid, len(candidates), want,
            )
            want = len(candidates)
        rng = substream(seed, "negatives", new_uid)
        neg = np.sort(rng.choice(candidates, size=want, replace=False))
        train_pos.append(pos)
        train_neg.append(neg.astype(np.int64))
        test_items.append(test)

    popularity = np.zeros(num_items, dtype=np.int64)
    for pos in train_pos:
        popularity[pos] += 1

    return InteractionDataset(
        num_users=len(retained),
        num_items=num_items,
        q=q,
        train_pos=train_pos,
        train_neg=train_neg,
        test_item=np.array(test_items, dtype=np.int64),
        item_popularity=popularity,
        retained_user_ids=retained,
    )
