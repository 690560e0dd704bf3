"""Attack plugins: popular-item mining and the item-promotion attacks.

A malicious client sees exactly what any participant sees: the broadcast
global model on the rounds it is selected, the shared learning rate, and
its own configuration. Mining accumulates, per item, the L2 distance
between the item's embedding at the client's consecutive observations;
items whose embeddings keep moving the most are the popular ones.

Two attacks build on the mined set P:

* `pieckipe`: rotates each target embedding toward the popular items via a
  rank-weighted mean cosine similarity, split into positive/negative
  subsets so that dissimilar popular items do not cancel each other.
* `pieckuea`: treats the popular embeddings as frozen pseudo-users and
  locally maximizes the targets' predicted scores on them, uploading the
  gradient that makes the server step land on the locally optimized value.

`oracle` is an evaluation-only upper bound that reads the true benign user
embeddings (deliberately outside the attacker knowledge model) and uploads
the exact gradient of the score-promotion objective.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .models import GlobalModel, GradientUpdate, log_score_item_grads

COS_EPS = 1e-12


# ---------------------------------------------------------------------------
# popular item mining
# ---------------------------------------------------------------------------

@dataclass
class MiningState:
    """Per-client accumulation of embedding movement between observations."""

    accumulator: np.ndarray = None
    snapshot: np.ndarray = None
    observations: int = 0


def mining_observe(state: MiningState, item_embeddings: np.ndarray) -> MiningState:
    """Record one observation of the broadcast item embeddings.

    The first observation only snapshots; each later one adds per-item
    ||v_now - v_last_seen||_2 to the accumulator. The table is kept by
    reference: broadcast snapshots are immutable between rounds, and
    sharing them keeps thousands of concurrently-mining clients cheap.
    """
    if state.snapshot is not None and state.snapshot.shape != item_embeddings.shape:
        raise ContractError(
            f"embedding table changed shape: {state.snapshot.shape} -> {item_embeddings.shape}"
        )
    if state.observations == 0:
        state.accumulator = np.zeros(item_embeddings.shape[0])
    else:
        state.accumulator += np.linalg.norm(item_embeddings - state.snapshot, axis=1)
    state.snapshot = item_embeddings
    state.observations += 1
    return state


def mining_finalize(state: MiningState, top_n: int, exclude=(), mining_rounds: int = 2):
    """Top-N items by accumulated movement, most-moved first.

    Returns None (not ready) until the client has observed mining_rounds + 1
    times, i.e. accumulated mining_rounds distances. Ties break toward the
    smaller item id; `exclude` ids never appear in the result.
    """
    if state.observations < mining_rounds + 1:
        return None
    acc = state.accumulator
    ids = np.arange(acc.shape[0])
    order = np.lexsort((ids, -acc))
    if len(exclude):
        keep = ~np.isin(order, np.asarray(list(exclude)))
        order = order[keep]
    return order[:top_n].copy()


# ---------------------------------------------------------------------------
# rank weights over a popular set
# ---------------------------------------------------------------------------

def linear_rank_weights(m: int) -> np.ndarray:
    """Normalized linear inverse rank: (m - r + 1) / sum, r = 1..m."""
    w = np.arange(m, 0, -1, dtype=np.float64)
    return w / w.sum()


def exponential_rank_weights(m: int) -> np.ndarray:
    """Normalized exponential inverse rank: exp(-(r - 1)) / sum, r = 1..m."""
    w = np.exp(-np.arange(m, dtype=np.float64))
    return w / w.sum()


def cosines_and_grads(popular_vecs: np.ndarray, target_vec: np.ndarray):
    """cos(v_k, v_j) per popular row plus d cos / d v_j rows."""
    p_norms = np.maximum(np.linalg.norm(popular_vecs, axis=1), COS_EPS)
    t_norm = max(np.linalg.norm(target_vec), COS_EPS)
    dots = popular_vecs @ target_vec
    cos = dots / (p_norms * t_norm)
    grads = popular_vecs / (p_norms * t_norm)[:, None] - np.outer(
        cos / t_norm**2, target_vec
    )
    return cos, grads


# ---------------------------------------------------------------------------
# popularity-alignment attack (pieckipe)
# ---------------------------------------------------------------------------

def pieckipe_loss_and_grads(model: GlobalModel, popular_ids, target_ids, lam: float = 1.0):
    """Alignment loss over mined popular items and its target-only gradients.

    Per target, the popular set splits into the positively and
    non-positively correlated subsets; each subset contributes its
    rank-weighted mean cosine scaled by lam, and empty subsets contribute
    nothing. Popular embeddings are constants; only target embeddings carry
    gradients. Returns (loss, {target_id: grad}).
    """
    if not 0.0 < lam <= 1.0:
        raise ConfigError(f"lam must be in (0, 1], got {lam}")
    popular_ids = np.asarray(popular_ids)
    target_ids = np.asarray(target_ids)
    if popular_ids.size == 0:
        raise ContractError("popular set is empty")
    pop_vecs = model.item_embeddings[popular_ids]
    n_targets = target_ids.size

    loss = 0.0
    grads = {}
    for tid in target_ids:
        v = model.item_embeddings[tid]
        cos, cos_grads = cosines_and_grads(pop_vecs, v)
        total = 0.0
        grad = np.zeros_like(v)
        for subset in (cos > 0.0, cos <= 0.0):
            m = int(subset.sum())
            if m == 0:
                continue
            kappa = linear_rank_weights(m)
            total += lam * float(kappa @ cos[subset]) / m
            grad += lam * (kappa @ cos_grads[subset]) / m
        loss += total
        grads[int(tid)] = -grad / n_targets
    return -loss / n_targets, grads


# ---------------------------------------------------------------------------
# pseudo-user score attack (pieckuea)
# ---------------------------------------------------------------------------

def pieckuea_loss_and_grads(model: GlobalModel, popular_ids, target_ids,
                            target_overrides=None):
    """Mean negative log-score of targets over the popular pseudo-users.

    target_overrides optionally maps target id -> embedding to evaluate
    (used by the internal optimization loop); by default the broadcast
    embeddings are used. Returns (loss, {target_id: grad}).
    """
    popular_ids = np.asarray(popular_ids)
    target_ids = np.asarray(target_ids)
    if popular_ids.size == 0:
        raise ContractError("popular set is empty")
    pseudo_users = model.item_embeddings[popular_ids]
    n = popular_ids.size
    n_targets = target_ids.size

    loss = 0.0
    grads = {}
    for tid in target_ids:
        if target_overrides is not None and int(tid) in target_overrides:
            v = target_overrides[int(tid)]
        else:
            v = model.item_embeddings[tid]
        probs, g = log_score_item_grads(model, pseudo_users, v)
        loss -= float(np.sum(np.log(np.clip(probs, 1e-300, None)))) / (n * n_targets)
        grads[int(tid)] = -g.sum(axis=0) / (n * n_targets)
    return loss, grads


def pieckuea_upload(model: GlobalModel, popular_ids, target_ids, eta: float,
                    batch_size: int = 5, num_steps: int = 3):
    """Effective gradients after locally optimizing private target copies.

    Runs num_steps gradient steps at the shared learning rate, each over a
    deterministic cyclic mini-batch of batch_size pseudo-users taken from
    the popular set in popularity order (the full set when batch_size covers
    it). Uploads (final - broadcast) / (-eta), so a lone sum-aggregated
    contribution lands the server exactly on the optimized value. With one
    step over the full set this reduces to the plain analytic gradient.
    """
    if eta <= 0:
        raise ConfigError("pseudo-user attack requires a positive learning rate")
    popular_ids = np.asarray(popular_ids)
    target_ids = np.asarray(target_ids)
    n = popular_ids.size
    current = {int(t): model.item_embeddings[t].copy() for t in target_ids}
    for step in range(num_steps):
        if batch_size >= n:
            batch = popular_ids
        else:
            idx = (step * batch_size + np.arange(batch_size)) % n
            batch = popular_ids[idx]
        _, grads = pieckuea_loss_and_grads(
            model, batch, target_ids, target_overrides=current
        )
        for tid in current:
            current[tid] = current[tid] - eta * grads[tid]
    return {
        tid: (model.item_embeddings[tid] - current[tid]) / eta for tid in current
    }


# ---------------------------------------------------------------------------
# oracle upper bound (evaluation only)
# ---------------------------------------------------------------------------

def oracle_attack_gradients(model: GlobalModel, benign_user_embeddings, target_ids):
    """Exact gradient of the score-promotion proxy over all benign users.

    Requires the true private user embeddings, which no real attacker has;
    the simulator grants them so the knowledge-free attacks can be compared
    against their unreachable ideal.
    """
    target_ids = np.asarray(target_ids)
    users = np.asarray(benign_user_embeddings)
    n_users = users.shape[0]
    n_targets = target_ids.size
    grads = {}
    for tid in target_ids:
        _, g = log_score_item_grads(model, users, model.item_embeddings[tid])
        grads[int(tid)] = -g.sum(axis=0) / (n_users * n_targets)
    return grads


# ---------------------------------------------------------------------------
# per-client plugin drivers used by the round engine
# ---------------------------------------------------------------------------

@dataclass
class MiningAttackClient:
    """Driver for one malicious client running pieckipe or pieckuea.

    Consumes only the broadcast model, the shared eta, and its own state.
    Uploads nothing until its own mining completes. With several target
    items it trains the first one and uploads copies of that gradient for
    every target ("train one then copy"); set joint_targets for the
    train-together variant.
    """

    kind: str                   # "pieckipe" | "pieckuea"
    target_ids: tuple
    mined_count: int
    mining_rounds: int = 2
    lam: float = 1.0
    uea_batch: int = 5
    uea_round_size: int = 3
    joint_targets: bool = False
    state: MiningState = field(default_factory=MiningState)
    popular: np.ndarray = None

    def on_selected(self, model: GlobalModel, eta: float):
        mining_observe(self.state, model.item_embeddings)
        if self.popular is None:
            self.popular = mining_finalize(
                self.state, self.mined_count, exclude=self.target_ids,
                mining_rounds=self.mining_rounds,
            )
        if self.popular is None:
            return None
        train_ids = self.target_ids if self.joint_targets else self.target_ids[:1]
        if self.kind == "pieckipe":
            _, grads = pieckipe_loss_and_grads(model, self.popular, train_ids, self.lam)
        elif self.kind == "pieckuea":
            grads = pieckuea_upload(
                model, self.popular, train_ids, eta,
                batch_size=self.uea_batch, num_steps=self.uea_round_size,
            )
        else:
            raise ConfigError(f"unknown attack kind: {self.kind!r}")
        if not self.joint_targets and len(self.target_ids) > 1:
            primary = grads[int(train_ids[0])]
            grads = {int(t): primary.copy() for t in self.target_ids}
        return GradientUpdate(item_grads=grads, sender_role="malicious")


@dataclass
class OracleAttackClient:
    """Evaluation-only driver with oracle access to benign embeddings."""

    target_ids: tuple
    benign_embeddings_provider: object  # callable -> (n_benign, d) array

    def on_selected(self, model: GlobalModel, eta: float):
        users = self.benign_embeddings_provider()
        grads = oracle_attack_gradients(model, users, self.target_ids)
        return GradientUpdate(item_grads=grads, sender_role="malicious")
