"""Finite-difference verification of every analytic gradient.

For random small instances of both model families, each loss in the package
(client BCE, the two attack losses, the two defense regularizers) is
compared against central finite differences over every parameter it
differentiates. A check passes when |analytic - numeric| <= 1e-8 absolute
or 1e-5 relative, the same gate the acceptance suite runs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .attacks import pieckipe_loss_and_grads, pieckuea_loss_and_grads
from .defense import defense_regularizers
from .models import GlobalModel, client_loss_and_grads, init_model
from .rng import substream

FD_STEP = 1e-6
ABS_TOL = 1e-8
REL_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    trials: int
    worst_abs: float
    worst_rel: float
    passed: bool
    seconds: float


def _grad_close(analytic: float, numeric: float):
    abs_err = abs(analytic - numeric)
    rel_err = abs_err / max(abs(analytic), abs(numeric), 1e-300)
    return abs_err, rel_err, (abs_err <= ABS_TOL or rel_err <= REL_TOL)


def central_difference(fun, vec: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of a scalar function over a vector."""
    out = np.zeros_like(vec)
    for idx in range(vec.size):
        orig = vec.flat[idx]
        vec.flat[idx] = orig + step
        hi = fun()
        vec.flat[idx] = orig - step
        lo = fun()
        vec.flat[idx] = orig
        out.flat[idx] = (hi - lo) / (2.0 * step)
    return out


def _random_model(family: str, rng: np.random.Generator, num_items: int = 14,
                  dim: int = 8) -> GlobalModel:
    model = init_model(family, num_items, dim, rng, dl_layers=(16, 8, 4))
    # moderate parameter scale keeps scores away from saturation while
    # making gradients large enough for a meaningful relative check
    model.item_embeddings[...] = rng.normal(0.0, 0.4, size=model.item_embeddings.shape)
    if family == "dl":
        for w in model.weights:
            w[...] = rng.normal(0.0, 0.4, size=w.shape)
        for b in model.biases:
            b[...] = rng.normal(0.0, 0.1, size=b.shape)
        model.projection[...] = rng.normal(0.0, 0.4, size=model.projection.shape)
    return model


def _compare_many(pairs):
    worst_abs = worst_rel = 0.0
    ok = True
    for analytic, numeric in pairs:
        analytic = np.asarray(analytic)
        numeric = np.asarray(numeric)
        for a, n in zip(analytic.ravel(), numeric.ravel()):
            abs_err, rel_err, good = _grad_close(a, n)
            if not good:
                ok = False
                worst_abs = max(worst_abs, abs_err)
                worst_rel = max(worst_rel, rel_err)
    return ok, worst_abs, worst_rel


def _check_bce(family: str, trials: int, seed: int) -> CheckResult:
    rng = substream(seed, "selfcheck", "bce", family)
    start = time.perf_counter()
    ok_all, wa, wr = True, 0.0, 0.0
    for _ in range(trials):
        model = _random_model(family, rng)
        user = rng.normal(0.0, 0.4, size=model.dim)
        items = rng.choice(model.num_items, size=6, replace=False)
        labels = (rng.random(6) < 0.5).astype(float)

        def loss():
            return client_loss_and_grads(model, user, items, labels)[0]

        _, item_grads, user_grad, params = client_loss_and_grads(model, user, items, labels)
        pairs = [(user_grad, central_difference(loss, user))]
        for row, j in enumerate(items):
            pairs.append((item_grads[row], central_difference(loss, model.item_embeddings[j])))
        if params is not None:
            w_g, b_g, h_g = params
            for layer in range(len(model.weights)):
                pairs.append((w_g[layer], central_difference(loss, model.weights[layer])))
                pairs.append((b_g[layer], central_difference(loss, model.biases[layer])))
            pairs.append((h_g, central_difference(loss, model.projection)))
        ok, a, r = _compare_many(pairs)
        ok_all &= ok
        wa, wr = max(wa, a), max(wr, r)
    return CheckResult(f"bce_gradients[{family}]", trials, wa, wr, ok_all,
                       time.perf_counter() - start)


def _check_ipe(family: str, trials: int, seed: int) -> CheckResult:
    rng = substream(seed, "selfcheck", "ipe", family)
    start = time.perf_counter()
    ok_all, wa, wr = True, 0.0, 0.0
    for _ in range(trials):
        model = _random_model(family, rng)
        popular = rng.choice(model.num_items - 2, size=10, replace=False)
        targets = np.array([model.num_items - 1, model.num_items - 2])
        lam = float(rng.uniform(0.3, 1.0))

        def loss():
            return pieckipe_loss_and_grads(model, popular, targets, lam)[0]

        _, grads = pieckipe_loss_and_grads(model, popular, targets, lam)
        pairs = [
            (grads[int(t)], central_difference(loss, model.item_embeddings[t]))
            for t in targets
        ]
        ok, a, r = _compare_many(pairs)
        ok_all &= ok
        wa, wr = max(wa, a), max(wr, r)
    return CheckResult(f"ipe_gradients[{family}]", trials, wa, wr, ok_all,
                       time.perf_counter() - start)


def _check_uea(family: str, trials: int, seed: int) -> CheckResult:
    rng = substream(seed, "selfcheck", "uea", family)
    start = time.perf_counter()
    ok_all, wa, wr = True, 0.0, 0.0
    for _ in range(trials):
        model = _random_model(family, rng)
        popular = rng.choice(model.num_items - 2, size=8, replace=False)
        targets = np.array([model.num_items - 1, model.num_items - 2])

        def loss():
            return pieckuea_loss_and_grads(model, popular, targets)[0]

        _, grads = pieckuea_loss_and_grads(model, popular, targets)
        pairs = [
            (grads[int(t)], central_difference(loss, model.item_embeddings[t]))
            for t in targets
        ]
        ok, a, r = _compare_many(pairs)
        ok_all &= ok
        wa, wr = max(wa, a), max(wr, r)
    return CheckResult(f"uea_gradients[{family}]", trials, wa, wr, ok_all,
                       time.perf_counter() - start)


def _check_regularizers(family: str, trials: int, seed: int) -> CheckResult:
    rng = substream(seed, "selfcheck", "regularizers", family)
    start = time.perf_counter()
    ok_all, wa, wr = True, 0.0, 0.0
    for _ in range(trials):
        model = _random_model(family, rng)
        user = rng.normal(0.0, 0.4, size=model.dim)
        popular = rng.choice(model.num_items, size=5, replace=False)
        d_items = rng.choice(model.num_items, size=7, replace=False)

        def re1():
            return defense_regularizers(model, user, popular, d_items).re1

        def re2():
            return defense_regularizers(model, user, popular, d_items).re2

        reg = defense_regularizers(model, user, popular, d_items)
        pairs = [(reg.re2_user_grad, central_difference(re2, user))]
        for j, grad in reg.re1_item_grads.items():
            pairs.append((grad, central_difference(re1, model.item_embeddings[j])))
        ok, a, r = _compare_many(pairs)
        ok_all &= ok
        wa, wr = max(wa, a), max(wr, r)
    return CheckResult(f"regularizer_gradients[{family}]", trials, wa, wr, ok_all,
                       time.perf_counter() - start)


def run_selfcheck(trials: int = 100, seed: int = 1234) -> list:
    """Run the full gradient suite; returns one CheckResult per check."""
    results = []
    for family in ("mf", "dl"):
        results.append(_check_bce(family, trials, seed))
        results.append(_check_ipe(family, trials, seed))
        results.append(_check_uea(family, trials, seed))
        results.append(_check_regularizers(family, trials, seed))
    return results
