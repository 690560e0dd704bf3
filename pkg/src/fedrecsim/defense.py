"""Server-side robust aggregators and the client-side regularization defense.

Aggregation operates per parameter: each item embedding independently, and
each interaction-tower tensor flattened. The baseline is a plain sum (the
server's update is eta * Agg(...)). Robust kinds produce one representative
vector; by default that representative is scaled by the contribution count
so switching aggregators does not silently rescale the effective learning
rate (set scale_mode="representative" for the unscaled value).

The krum family resolves its byzantine estimate per parameter as
f = round(fraction * n). Whenever a kind is undefined for the received
count (n - f - 2 < 1 for krum/multi-krum/bulyan, n <= 2f for trimmed mean),
dispatch falls back to a plain sum with a logged warning; cold items with a
handful of contributions hit this path routinely, which is precisely how
minority-poisoned items slip through filter-style defenses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .models import EPS, GlobalModel, client_loss_and_grads
from .attacks import cosines_and_grads, exponential_rank_weights

log = logging.getLogger(__name__)

AGGREGATOR_KINDS = (
    "sum", "norm_bound", "median", "trimmed_mean", "krum", "multi_krum", "bulyan",
)


@dataclass
class AggregatorSpec:
    kind: str = "sum"
    tau: float = 1.0              # norm_bound clip threshold
    fraction: float = 0.05        # trim / byzantine fraction, resolved per call
    f_count: int = None           # absolute override for the resolved f
    scale_mode: str = "count"     # "count" | "representative"

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ConfigError(f"unknown aggregator kind: {self.kind!r}")
        if self.tau <= 0:
            raise ConfigError("norm_bound threshold tau must be > 0")
        if self.f_count is None and not 0.0 <= self.fraction < 0.5:
            raise ConfigError("byzantine fraction must lie in [0, 0.5)")

    def resolve_f(self, n: int) -> int:
        if self.f_count is not None:
            return self.f_count
        return int(round(self.fraction * n))


_warned = set()


def _warn_fallback(kind: str, n: int, f: int):
    key = (kind, n, f)
    if key not in _warned:
        _warned.add(key)
        log.warning("%s undefined for n=%d, f=%d; falling back to sum", kind, n, f)


def krum_select(stack: np.ndarray, f: int) -> int:
    """Index of the contribution with the smallest sum of squared distances
    to its n - f - 2 nearest peers (ties -> smallest index)."""
    n = stack.shape[0]
    k = max(n - f - 2, 0)
    diffs = stack[:, None, :] - stack[None, :, :]
    dist2 = np.einsum("ijk,ijk->ij", diffs, diffs)
    np.fill_diagonal(dist2, np.inf)
    part = np.sort(dist2, axis=1)[:, :k]
    scores = part.sum(axis=1) if k else np.zeros(n)
    return int(np.argmin(scores))  # argmin returns the first minimum


def multi_krum_indices(stack: np.ndarray, f: int) -> list:
    """Iteratively krum-select n - 2f contributions from a shrinking pool."""
    n = stack.shape[0]
    pool = list(range(n))
    selected = []
    while pool and len(selected) < n - 2 * f:
        local = krum_select(stack[pool], f)
        selected.append(pool.pop(local))
    return selected


def _trimmed_mean(stack: np.ndarray, f: int) -> np.ndarray:
    srt = np.sort(stack, axis=0)
    return srt[f: stack.shape[0] - f].mean(axis=0)


def combine(spec: AggregatorSpec, stack: np.ndarray) -> np.ndarray:
    """Aggregate one parameter's contribution stack (n, dim) -> (dim,).

    The stack rows must already be in canonical (client id) order; ties in
    the krum family resolve toward earlier rows.
    """
    stack = np.asarray(stack, dtype=np.float64)
    if stack.ndim != 2 or stack.shape[0] == 0:
        raise ContractError("contribution stack must be a nonempty (n, dim) array")
    n = stack.shape[0]
    kind = spec.kind

    if kind == "sum":
        return stack.sum(axis=0)
    if kind == "norm_bound":
        norms = np.linalg.norm(stack, axis=1)
        scale = np.minimum(1.0, spec.tau / np.maximum(norms, 1e-300))
        return (stack * scale[:, None]).sum(axis=0)

    f = spec.resolve_f(n)
    if kind == "trimmed_mean":
        if n - 2 * f < 1:
            _warn_fallback(kind, n, f)
            return stack.sum(axis=0)
        rep = _trimmed_mean(stack, f)
    elif kind == "median":
        rep = np.median(stack, axis=0)
    else:
        if n - f - 2 < 1:
            _warn_fallback(kind, n, f)
            return stack.sum(axis=0)
        if kind == "krum":
            rep = stack[krum_select(stack, f)]
        elif kind == "multi_krum":
            rep = stack[multi_krum_indices(stack, f)].mean(axis=0)
        else:  # bulyan
            kept = stack[multi_krum_indices(stack, f)]
            trim = min(f, (kept.shape[0] - 1) // 2)  # keep at least one value per dim
            rep = _trimmed_mean(kept, trim)

    if spec.scale_mode == "count":
        return rep * n
    return rep


def aggregate_updates(spec: AggregatorSpec, contributions):
    """Combine per-item contribution lists into final gradients.

    contributions maps item id -> list of (client_id, vec); lists are
    sorted by client id here so worker scheduling cannot perturb results.
    Returns {item_id: aggregated vec}.
    """
    out = {}
    for item in sorted(contributions):
        entries = sorted(contributions[item], key=lambda e: e[0])
        stack = np.stack([vec for _, vec in entries])
        out[item] = combine(spec, stack)
    return out


# ---------------------------------------------------------------------------
# KL between embeddings (softmax construction)
# ---------------------------------------------------------------------------

def softmax(v: np.ndarray) -> np.ndarray:
    e = np.exp(v - np.max(v))
    return e / e.sum()


def kl_softmax(a: np.ndarray, b: np.ndarray) -> float:
    """KL(softmax(a) || softmax(b)); the embeddings have no native density,
    softmax is the fixed nonparametric choice used everywhere in this
    package. Probabilities are clamped like the BCE path."""
    p = np.clip(softmax(a), EPS, None)
    q = np.clip(softmax(b), EPS, None)
    return float(np.sum(p * (np.log(p) - np.log(q))))


# ---------------------------------------------------------------------------
# client-side regularization defense
# ---------------------------------------------------------------------------

@dataclass
class RegularizerResult:
    re1: float
    re2: float
    re1_item_grads: dict      # item id in DeltaD -> d-vector
    re2_user_grad: np.ndarray


def defense_regularizers(model: GlobalModel, user_vec: np.ndarray,
                         popular_ids, d_i_items) -> RegularizerResult:
    """The two defense terms and their exact gradients.

    Re1: exponential-rank-weighted mean cosine between the user's
    non-popular training items (DeltaD = D_i minus the mined set) and the
    mined popular items; gradients flow to the DeltaD embeddings only.
    Re2: exponential-rank-weighted KL from each popular embedding's softmax
    to the user's; its gradient w.r.t. the user embedding has the closed
    form softmax(u) - sum_k kappa'_k softmax(v_k). Popular embeddings are
    constants for both terms. Training *maximizes* both (they enter the
    defended loss with minus signs).
    """
    popular_ids = np.asarray(popular_ids)
    d_i_items = np.asarray(d_i_items)
    if popular_ids.size == 0:
        raise ContractError("popular set is empty")
    kappa = exponential_rank_weights(popular_ids.size)
    pop_vecs = model.item_embeddings[popular_ids]

    delta = d_i_items[~np.isin(d_i_items, popular_ids)]
    re1 = 0.0
    re1_grads = {}
    if delta.size:
        for j in delta:
            cos, cos_grads = cosines_and_grads(pop_vecs, model.item_embeddings[j])
            re1 += float(kappa @ cos)
            re1_grads[int(j)] = (kappa @ cos_grads) / delta.size
        re1 /= delta.size

    s_user = softmax(user_vec)
    log_s_user = np.log(np.clip(s_user, EPS, None))
    re2 = 0.0
    weighted_pop_softmax = np.zeros_like(user_vec)
    for w, v in zip(kappa, pop_vecs):
        p = softmax(v)
        re2 += w * float(np.sum(p * (np.log(np.clip(p, EPS, None)) - log_s_user)))
        weighted_pop_softmax += w * p
    re2_user_grad = s_user - weighted_pop_softmax
    return RegularizerResult(re1, re2, re1_grads, re2_user_grad)


def defended_client_step(model: GlobalModel, user_vec: np.ndarray, item_ids,
                         labels, popular_ids, beta: float, gamma: float):
    """Benign training step on the combined defended loss
    BCE - beta * Re1 - gamma * Re2.

    Same contract as `client_loss_and_grads`; with beta = gamma = 0 the
    outputs are bit-identical to the undefended step.
    """
    loss, item_grads, user_grad, param_grads = client_loss_and_grads(
        model, user_vec, item_ids, labels
    )
    if beta == 0.0 and gamma == 0.0:
        return loss, item_grads, user_grad, param_grads
    reg = defense_regularizers(model, user_vec, popular_ids, item_ids)
    loss = loss - beta * reg.re1 - gamma * reg.re2
    if beta != 0.0 and reg.re1_item_grads:
        row_of = {int(j): r for r, j in enumerate(np.asarray(item_ids))}
        for j, grad in reg.re1_item_grads.items():
            item_grads[row_of[j]] -= beta * grad
    if gamma != 0.0:
        user_grad = user_grad - gamma * reg.re2_user_grad
    return loss, item_grads, user_grad, param_grads
