"""Forward scoring and closed-form gradients for both model families.

* "mf": score = sigmoid(u . v)  (a raw-clamped variant is available via
  `mf_score_mode="clamped_raw"` for sensitivity checks).
* "dl": score = sigmoid(h . relu(W_L ... relu(W_1 [u ++ v] + b_1) ... + b_L)),
  an NCF-style tower whose first layer consumes the concatenated pair.

Gradients are exact analytic derivatives of the mean binary cross-entropy
over a client's private item set; no autodiff is involved. All tensors are
float64 for bitwise reproducibility.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, NumericalError

EPS = 1e-12  # probability clamp applied before logarithms


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60.0, 60.0)))


def bce(labels, probs) -> float:
    p = np.clip(probs, EPS, 1.0 - EPS)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


@dataclass
class GlobalModel:
    """Server-side shared parameters: item embeddings plus, for "dl", the
    learnable interaction tower (weights are (out, in) matrices)."""

    family: str
    item_embeddings: np.ndarray
    weights: tuple = ()
    biases: tuple = ()
    projection: np.ndarray = None
    mf_score_mode: str = "sigmoid"

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.item_embeddings.shape[1]

    def copy(self) -> "GlobalModel":
        return GlobalModel(
            family=self.family,
            item_embeddings=self.item_embeddings.copy(),
            weights=tuple(w.copy() for w in self.weights),
            biases=tuple(b.copy() for b in self.biases),
            projection=None if self.projection is None else self.projection.copy(),
            mf_score_mode=self.mf_score_mode,
        )


@dataclass
class ClientState:
    """One user's private state. The role tag is simulator ground truth."""

    user_embedding: np.ndarray
    role: str = "benign"
    times_sampled: int = 0


@dataclass
class GradientUpdate:
    """Per-parameter gradient contributions uploaded by one client.

    item_grads maps item id -> d-vector. The interaction-tower fields are
    None except for benign "dl" clients. sender_role never reaches the
    aggregators; it exists for evaluation bookkeeping only.
    """

    item_grads: dict = field(default_factory=dict)
    weight_grads: tuple = None
    bias_grads: tuple = None
    projection_grad: np.ndarray = None
    sender_role: str = "benign"


def init_model(
    family: str,
    num_items: int,
    dim: int,
    rng: np.random.Generator,
    dl_layers=(32, 16, 8),
    init_scale: float = 0.01,
    mf_score_mode: str = "sigmoid",
) -> GlobalModel:
    """Draw initial parameters: N(0, init_scale^2) embeddings/weights, zero biases."""
    if family not in ("mf", "dl"):
        raise ConfigError(f"unknown model family: {family!r}")
    emb = rng.normal(0.0, init_scale, size=(num_items, dim))
    if family == "mf":
        return GlobalModel("mf", emb, mf_score_mode=mf_score_mode)
    widths = [2 * dim] + list(dl_layers)
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(rng.normal(0.0, init_scale, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    projection = rng.normal(0.0, init_scale, size=widths[-1])
    return GlobalModel("dl", emb, tuple(weights), tuple(biases), projection)


def init_user_embeddings(
    num_users: int, dim: int, rng: np.random.Generator, init_scale: float = 0.01
) -> np.ndarray:
    return rng.normal(0.0, init_scale, size=(num_users, dim))


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _dl_forward(model: GlobalModel, x: np.ndarray):
    """Tower forward over a batch of concatenated pairs x (n, 2d).

    Returns (logits, pre-activations, post-activations); the activation
    lists are the caches consumed by `_dl_backward`.
    """
    acts = [x]
    pres = []
    for w, b in zip(model.weights, model.biases):
        a = acts[-1] @ w.T + b
        pres.append(a)
        acts.append(np.maximum(a, 0.0))
    logits = acts[-1] @ model.projection
    return logits, pres, acts


def _dl_backward(model: GlobalModel, dlogits: np.ndarray, pres, acts, want_params: bool):
    """Backpropagate per-row logit gradients to the input pairs.

    Returns (input_grads (n, 2d), weight_grads, bias_grads, projection_grad);
    the parameter gradients are summed over rows and are None when not asked.
    """
    w_grads = b_grads = h_grad = None
    if want_params:
        h_grad = acts[-1].T @ dlogits
        w_grads = [None] * len(model.weights)
        b_grads = [None] * len(model.weights)
    delta = np.outer(dlogits, model.projection)
    for layer in range(len(model.weights) - 1, -1, -1):
        delta = delta * (pres[layer] > 0.0)
        if want_params:
            w_grads[layer] = delta.T @ acts[layer]
            b_grads[layer] = delta.sum(axis=0)
        delta = delta @ model.weights[layer]
    if want_params:
        return delta, tuple(w_grads), tuple(b_grads), h_grad
    return delta, None, None, None


def pair_logits(model: GlobalModel, user_vecs: np.ndarray, item_vecs: np.ndarray):
    """Raw pre-sigmoid scores for row-aligned (user, item) vector batches."""
    if model.family == "mf":
        return np.sum(user_vecs * item_vecs, axis=1)
    x = np.concatenate([user_vecs, item_vecs], axis=1)
    logits, _, _ = _dl_forward(model, x)
    return logits


def predict(model: GlobalModel, user_vec: np.ndarray, item_vec: np.ndarray) -> float:
    """Predicted preference score in (0, 1) for a single pair."""
    if user_vec.shape != (model.dim,) or item_vec.shape != (model.dim,):
        raise ContractError(
            f"expected two {model.dim}-vectors, got {user_vec.shape} and {item_vec.shape}"
        )
    if model.family == "mf" and model.mf_score_mode == "clamped_raw":
        return float(np.clip(user_vec @ item_vec, EPS, 1.0 - EPS))
    logit = pair_logits(model, user_vec[None, :], item_vec[None, :])[0]
    return float(sigmoid(np.array(logit)))


def score_items(model: GlobalModel, user_vec: np.ndarray, item_ids=None) -> np.ndarray:
    """Ranking scores (raw logits, monotone in the predicted probability)
    of `item_ids` (default: all items) for one user.

    Ranking on logits rather than sigmoid outputs avoids float64 saturation
    ties between strongly-scored items.
    """
    emb = model.item_embeddings if item_ids is None else model.item_embeddings[item_ids]
    if model.family == "mf":
        return emb @ user_vec
    users = np.broadcast_to(user_vec, emb.shape)
    return pair_logits(model, users, emb)


# ---------------------------------------------------------------------------
# client-side loss / gradients
# ---------------------------------------------------------------------------

def client_loss_and_grads(model: GlobalModel, user_vec: np.ndarray, item_ids, labels):
    """Mean-BCE loss over the client's private items plus exact gradients.

    Returns (loss, item_grad_matrix (n, d) row-aligned with item_ids,
    user_grad (d,), param_grads) where param_grads is a
    (weight_grads, bias_grads, projection_grad) tuple for "dl" and None
    for "mf". item_ids must not contain duplicates.
    """
    item_ids = np.asarray(item_ids)
    labels = np.asarray(labels, dtype=np.float64)
    if item_ids.size == 0:
        raise ContractError("client training set is empty")
    item_vecs = model.item_embeddings[item_ids]
    n = item_ids.size

    if model.family == "mf":
        z = item_vecs @ user_vec
        if model.mf_score_mode == "clamped_raw":
            probs = np.clip(z, EPS, 1.0 - EPS)
            live = (z > EPS) & (z < 1.0 - EPS)
            dz = np.where(live, (-labels / probs + (1.0 - labels) / (1.0 - probs)), 0.0) / n
        else:
            probs = sigmoid(z)
            dz = (probs - labels) / n
        loss = bce(labels, probs)
        item_grads = dz[:, None] * user_vec
        user_grad = item_vecs.T @ dz
        return loss, item_grads, user_grad, None

    users = np.broadcast_to(user_vec, item_vecs.shape)
    x = np.concatenate([users, item_vecs], axis=1)
    logits, pres, acts = _dl_forward(model, x)
    probs = sigmoid(logits)
    loss = bce(labels, probs)
    dlogits = (probs - labels) / n
    input_grads, w_grads, b_grads, h_grad = _dl_backward(model, dlogits, pres, acts, True)
    d = model.dim
    user_grad = input_grads[:, :d].sum(axis=0)
    item_grads = input_grads[:, d:]
    return loss, item_grads, user_grad, (w_grads, b_grads, h_grad)


def log_score_item_grads(model: GlobalModel, user_vecs: np.ndarray, item_vec: np.ndarray):
    """Per-row gradients of log(score(u_row, v)) with respect to v.

    Returns (probs (n,), grads (n, d)). The user vectors are treated as
    constants, which is exactly what the pseudo-user and oracle objectives
    need.
    """
    item_rows = np.broadcast_to(item_vec, user_vecs.shape)
    if model.family == "mf":
        z = user_vecs @ item_vec
        probs = sigmoid(z)
        return probs, (1.0 - probs)[:, None] * user_vecs
    x = np.concatenate([user_vecs, item_rows], axis=1)
    logits, pres, acts = _dl_forward(model, x)
    probs = sigmoid(logits)
    input_grads, _, _, _ = _dl_backward(model, (1.0 - probs), pres, acts, False)
    return probs, input_grads[:, model.dim:]


# ---------------------------------------------------------------------------
# server-side update
# ---------------------------------------------------------------------------

def _check_finite(name: str, value: np.ndarray):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite aggregated gradient for {name}")


def apply_update(model: GlobalModel, update: GradientUpdate, eta: float) -> GlobalModel:
    """One server step: p <- p - eta * g for every parameter with an entry."""
    new = model.copy()
    for item, grad in update.item_grads.items():
        _check_finite(f"item {item}", grad)
        new.item_embeddings[item] -= eta * grad
    if model.family == "dl" and update.weight_grads is not None:
        for layer, (gw, gb) in enumerate(zip(update.weight_grads, update.bias_grads)):
            _check_finite(f"W{layer + 1}", gw)
            _check_finite(f"b{layer + 1}", gb)
            new.weights[layer][...] = new.weights[layer] - eta * gw
            new.biases[layer][...] = new.biases[layer] - eta * gb
        _check_finite("h", update.projection_grad)
        new.projection[...] = new.projection - eta * update.projection_grad
    return new


# ---------------------------------------------------------------------------
# checkpoints: json header line + little-endian float64 tensor dumps
# ---------------------------------------------------------------------------

def save_model(model: GlobalModel, path, seed=None):
    header = {
        "family": model.family,
        "num_items": model.num_items,
        "dim": model.dim,
        "layers": [w.shape[0] for w in model.weights],
        "mf_score_mode": model.mf_score_mode,
        "seed": seed,
    }
    tensors = [model.item_embeddings]
    tensors += list(model.weights) + list(model.biases)
    if model.projection is not None:
        tensors.append(model.projection)
    with open(path, "wb") as fh:
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f8").tobytes())


def load_model(path) -> GlobalModel:
    with open(path, "rb") as fh:
        (head_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(head_len).decode("utf-8"))
        body = fh.read()

    def take(shape, offset):
        count = int(np.prod(shape))
        arr = np.frombuffer(
            body, dtype="<f8", count=count, offset=offset * 8
        ).reshape(shape).astype(np.float64)
        return arr, offset + count

    num_items, dim = header["num_items"], header["dim"]
    emb, off = take((num_items, dim), 0)
    if header["family"] == "mf":
        return GlobalModel("mf", emb, mf_score_mode=header["mf_score_mode"])
    widths = [2 * dim] + list(header["layers"])
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        w, off = take((fan_out, fan_in), off)
        weights.append(w)
    for fan_out in widths[1:]:
        b, off = take((fan_out,), off)
        biases.append(b)
    h, off = take((widths[-1],), off)
    return GlobalModel("dl", emb, tuple(weights), tuple(biases), h)
