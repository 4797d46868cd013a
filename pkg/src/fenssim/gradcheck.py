"""Random small instances of every trainable model, for finite-difference
gradient checks.  Instances whose ReLU pre-activations come within
``KINK_MARGIN`` of zero are redrawn, since central differences are invalid
across a kink."""

from __future__ import annotations

import numpy as np

from .models import aggregator_loss_and_grad, mlp_forward, mlp_loss_and_grad
from .numerics import grad_check

KINK_MARGIN = 1e-2


def _min_abs_pre(pres) -> float:
    return min((float(np.min(np.abs(p))) for p in pres if p.size), default=np.inf)


def _mlp_pres(params, x):
    _, cache = mlp_forward(params, x, keep_cache=True)
    return [pre for _, pre in cache[:-1]]


def mlp_instance(rng):
    while True:
        d, h, C, n = rng.integers(2, 6), rng.integers(2, 6), rng.integers(2, 5), rng.integers(2, 6)
        params = {"W0": rng.normal(0, 0.7, (d, h)), "b0": rng.normal(0, 0.3, h),
                  "W1": rng.normal(0, 0.7, (h, C)), "b1": rng.normal(0, 0.3, C)}
        x = rng.normal(size=(n, d))
        y = rng.integers(0, C, n)
        if _min_abs_pre(_mlp_pres(params, x)) > KINK_MARGIN:
            return mlp_loss_and_grad, params, (x, y)


def _agg_fn(kind):
    def fn(params, batch):
        Z, x, y = batch
        return aggregator_loss_and_grad(kind, params, Z, x, y)

    return fn


def aggregator_instance(kind, rng):
    while True:
        M, C, n, d = rng.integers(1, 4), rng.integers(2, 5), rng.integers(2, 6), rng.integers(2, 5)
        Z = rng.normal(0, 2, (n, M, C))
        x = rng.normal(size=(n, d))
        y = rng.integers(0, C, n)
        if kind == "linear":
            params = {"w": rng.normal(0, 1, M)}
        elif kind == "per_class":
            params = {"lambda": rng.normal(0, 1, (M, C))}
        elif kind == "nn":
            k = rng.integers(2, 6)
            params = {"W1": rng.normal(0, 0.5, (M * C, k)), "W2": rng.normal(0, 0.5, (k, C))}
            if _min_abs_pre([Z.reshape(n, -1) @ params["W1"]]) <= KINK_MARGIN:
                continue
        elif kind == "moe":
            h = rng.integers(2, 6)
            params = {"W0": rng.normal(0, 0.7, (d, h)), "b0": rng.normal(0, 0.3, h),
                      "W1": rng.normal(0, 0.7, (h, M)), "b1": rng.normal(0, 0.3, M)}
            if _min_abs_pre(_mlp_pres(params, x)) <= KINK_MARGIN:
                continue
        else:
            raise ValueError(kind)
        return _agg_fn(kind), params, (Z, x, y)


CHECKED = ("mlp", "nn", "per_class", "linear", "moe")


def check_all(instances: int = 20, seed: int = 0, eps: float = 1e-4) -> dict:
    """Worst relative error per model over ``instances`` random draws."""
    rng = np.random.default_rng(seed)
    worst = {}
    for name in CHECKED:
        errs = []
        for _ in range(instances):
            fn, params, batch = mlp_instance(rng) if name == "mlp" else aggregator_instance(name, rng)
            errs.append(grad_check(fn, params, batch, eps=eps))
        worst[name] = max(errs)
    return worst
