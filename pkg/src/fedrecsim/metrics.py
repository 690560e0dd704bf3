"""Evaluation metrics and the poison-ratio analysis tools.

ER@K (exposure ratio): for a target item, the fraction of eligible benign
users (those who did not train on it) whose top-K recommendation list
contains it. HR@K (hit ratio): the fraction of benign users whose held-out
test item appears in their top-K list over *all* items outside their
training positives (full ranking, no sampled candidate subset).

Both metrics rank by the model's raw pre-sigmoid score, which orders items
identically to the predicted probability, with ties broken toward the
smaller item id.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset
from .defense import kl_softmax
from .errors import ContractError
from .models import GlobalModel, pair_logits

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# ranking
# ---------------------------------------------------------------------------

def score_matrix(model: GlobalModel, user_embeddings: np.ndarray,
                 chunk: int = 64) -> np.ndarray:
    """Raw ranking scores for every (user, item) pair, (n_users, n_items)."""
    if model.family == "mf":
        return user_embeddings @ model.item_embeddings.T
    n_users = user_embeddings.shape[0]
    n_items = model.num_items
    out = np.empty((n_users, n_items))
    items = model.item_embeddings
    for start in range(0, n_users, chunk):
        block = user_embeddings[start:start + chunk]
        users = np.repeat(block, n_items, axis=0)
        tiled = np.tile(items, (block.shape[0], 1))
        out[start:start + chunk] = pair_logits(model, users, tiled).reshape(
            block.shape[0], n_items
        )
    return out


def top_k_from_scores(scores: np.ndarray, excluded_mask, k: int) -> np.ndarray:
    """Top-k item ids per user row, ties toward smaller ids.

    excluded_mask (same shape, boolean) marks items that must not be
    recommended (the user's training positives). Rows are fully sorted via
    a stable lexsort, so the documented tie rule holds exactly.
    """
    scores = np.asarray(scores, dtype=np.float64)
    masked = np.where(excluded_mask, -np.inf, scores) if excluded_mask is not None else scores
    n_users, n_items = masked.shape
    k = min(k, n_items)
    ids = np.arange(n_items)
    out = np.empty((n_users, k), dtype=np.int64)
    for row in range(n_users):
        order = np.lexsort((ids, -masked[row]))
        out[row] = order[:k]
    return out


def top_k(model: GlobalModel, user_vec: np.ndarray, dataset: InteractionDataset,
          user: int, k: int) -> np.ndarray:
    """Ordered top-k uninteracted items for one user (test item included
    among the candidates)."""
    scores = score_matrix(model, user_vec[None, :])
    mask = np.zeros((1, dataset.num_items), dtype=bool)
    mask[0, dataset.train_pos[user]] = True
    return top_k_from_scores(scores, mask, k)[0]


# ---------------------------------------------------------------------------
# ER@K / HR@K
# ---------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    round_index: int
    er_at_k: float            # mean over targets, in [0, 1]
    per_target_er: dict
    hr_at_k: float
    k: int


def exposure_ratio(top_k_lists: np.ndarray, dataset: InteractionDataset,
                   target_ids) -> tuple:
    """Mean ER@K over targets plus the per-target values.

    Users whose training positives contain the target are excluded from its
    denominator; a target every user trained on is skipped with a warning.
    """
    target_ids = np.asarray(target_ids)
    if target_ids.size == 0:
        raise ContractError("no target items")
    pos_mask = dataset.pos_mask()
    per_target = {}
    for tid in target_ids:
        eligible = ~pos_mask[:, tid]
        denom = int(eligible.sum())
        if denom == 0:
            log.warning("target %d interacted by every user; skipped", tid)
            continue
        hits = np.any(top_k_lists[eligible] == tid, axis=1).sum()
        per_target[int(tid)] = hits / denom
    if not per_target:
        return 0.0, per_target
    return float(np.mean(list(per_target.values()))), per_target


def hit_ratio(top_k_lists: np.ndarray, dataset: InteractionDataset) -> float:
    """Fraction of users whose held-out test item is in their top-K list."""
    hits = np.any(top_k_lists == dataset.test_item[:, None], axis=1)
    return float(hits.mean())


def evaluate(model: GlobalModel, user_embeddings: np.ndarray,
             dataset: InteractionDataset, target_ids, k: int,
             round_index: int = 0) -> EvaluationReport:
    """Full benign-user evaluation at rank k."""
    scores = score_matrix(model, user_embeddings)
    lists = top_k_from_scores(scores, dataset.pos_mask(), k)
    er, per_target = exposure_ratio(lists, dataset, target_ids)
    hr = hit_ratio(lists, dataset)
    return EvaluationReport(round_index, er, per_target, hr, k)


# ---------------------------------------------------------------------------
# embedding-distribution analytics
# ---------------------------------------------------------------------------

def pkl(embeddings_a: np.ndarray, embeddings_b: np.ndarray) -> float:
    """Average pairwise KL divergence between two embedding sets."""
    a = np.atleast_2d(embeddings_a)
    b = np.atleast_2d(embeddings_b)
    if a.size == 0 or b.size == 0 or a.shape[1] != b.shape[1]:
        raise ContractError("pkl needs two nonempty sets of equal dimension")
    total = 0.0
    for va in a:
        for vb in b:
            total += kl_softmax(va, vb)
    return total / (a.shape[0] * b.shape[0])


def ucr(popular_ids, dataset: InteractionDataset) -> float:
    """Fraction of users with at least one interaction (training positive or
    test item) inside the given item set."""
    popular = set(int(i) for i in np.asarray(popular_ids).ravel())
    if not popular:
        return 0.0
    covered = 0
    for u in range(dataset.num_users):
        if int(dataset.test_item[u]) in popular or any(
            int(j) in popular for j in dataset.train_pos[u]
        ):
            covered += 1
    return covered / dataset.num_users


# ---------------------------------------------------------------------------
# expected poison ratio (the analytical defense-failure argument)
# ---------------------------------------------------------------------------

def expected_poison_ratio(p_tilde: float, p_j: float) -> float:
    """Expected fraction of poisonous gradients among those the server
    receives for an item whose benign-inclusion probability is p_j."""
    if not 0.0 <= p_tilde < 1.0:
        raise ContractError(f"p_tilde must be in [0, 1), got {p_tilde}")
    if not 0.0 <= p_j <= 1.0:
        raise ContractError(f"p_j must be in [0, 1], got {p_j}")
    if p_tilde == 0.0:
        return 0.0
    return p_tilde / ((1.0 - p_tilde) * p_j + p_tilde)


def estimate_p_ij(dataset: InteractionDataset, item_id: int) -> np.ndarray:
    """Per-user probability that the item lands in the user's training set:
    1 for users who trained on it, q * |D+| / (|V| - |D+|) otherwise."""
    out = np.empty(dataset.num_users)
    for u in range(dataset.num_users):
        n_pos = len(dataset.train_pos[u])
        if dataset.pos_mask()[u, item_id]:
            out[u] = 1.0
        else:
            out[u] = dataset.q * n_pos / (dataset.num_items - n_pos)
    return out


def estimate_p_j(dataset: InteractionDataset, item_id: int) -> float:
    """Mean over benign users of the per-user inclusion probability."""
    return float(estimate_p_ij(dataset, item_id).mean())


def simulate_poison_fraction(p_ij: np.ndarray, p_tilde: float, batch: int,
                             rounds: int, rng: np.random.Generator) -> float:
    """Monte-Carlo check of `expected_poison_ratio`.

    Simulates `rounds` rounds of user sampling: malicious clients always
    contribute for the item, a selected benign user contributes with its
    own inclusion probability. Returns total poisonous contributions over
    total contributions (the expected-proportion estimator).
    """
    n_benign = p_ij.shape[0]
    n_malicious = int(round(n_benign * p_tilde / (1.0 - p_tilde)))
    total = n_benign + n_malicious
    if batch > total:
        raise ContractError("batch exceeds the user pool")
    poisoned = received = 0
    for _ in range(rounds):
        chosen = rng.choice(total, size=batch, replace=False)
        benign_chosen = chosen[chosen < n_benign]
        n_mal = batch - benign_chosen.size
        n_ben = int((rng.random(benign_chosen.size) < p_ij[benign_chosen]).sum())
        poisoned += n_mal
        received += n_mal + n_ben
    if received == 0:
        return 0.0
    return poisoned / received


# ---------------------------------------------------------------------------
# embedding-movement ranking report
# ---------------------------------------------------------------------------

def popularity_ranks(popularity: np.ndarray) -> np.ndarray:
    """1-based rank per item by interaction count (descending, ties by id)."""
    ids = np.arange(popularity.shape[0])
    order = np.lexsort((ids, -popularity))
    ranks = np.empty_like(order)
    ranks[order] = np.arange(1, order.size + 1)
    return ranks


@dataclass
class MiningReport:
    rows: list           # (round, item_id, delta_norm, true_pop_rank)
    all_static: bool     # no item moved in any reported round


def delta_norm_rank_report(history: dict, popularity: np.ndarray,
                           top_m: int = 50, rounds=None) -> MiningReport:
    """Popularity ranks of the top-m moved items at the requested rounds.

    history maps round index -> per-item embedding movement for that round
    (as recorded by the engine). Reproduces the diagnostic that late-round
    movement leaders are dominated by genuinely popular items.
    """
    if len(history) < 2:
        raise ContractError("need at least two observed rounds")
    ranks = popularity_ranks(popularity)
    ids = np.arange(popularity.shape[0])
    if rounds is None:
        rounds = sorted(history)
    rows = []
    all_static = True
    for r in rounds:
        deltas = history[r]
        if np.any(deltas > 0):
            all_static = False
        order = np.lexsort((ids, -deltas))[:top_m]
        for item in order:
            rows.append((int(r), int(item), float(deltas[item]), int(ranks[item])))
    if all_static:
        log.warning("all item embeddings static in the reported rounds")
    return MiningReport(rows=rows, all_static=all_static)
