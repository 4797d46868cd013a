"""Local classifiers and the aggregation rules that combine their logits.

Logit tensors for a batch have shape ``(n, M, C)``: sample, client, class.
Every aggregator also accepts a single ``(M, C)`` matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    FLOAT,
    ParamSet,
    ShapeError,
    linear_backward,
    linear_forward,
    matmul,
    param_count,
    relu,
    relu_backward,
    softmax_cross_entropy,
)

STATIC_KINDS = ("average", "weighted_average", "vote")
TRAINABLE_KINDS = ("linear", "per_class", "nn", "moe")
AGGREGATOR_KINDS = STATIC_KINDS + TRAINABLE_KINDS

COMPETENCY_EPS = 1e-3


# ---------------------------------------------------------------------------
# Multilayer perceptron


def init_mlp(arch, rng: np.random.Generator, zero_last: bool = False) -> ParamSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or min(arch) < 1:
        raise ValueError(f"invalid architecture {arch}")
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(arch[:-1], arch[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        last = i == len(arch) - 2
        if zero_last and last:
            params[f"W{i}"] = np.zeros((fan_in, fan_out), dtype=FLOAT)
            params[f"b{i}"] = np.zeros(fan_out, dtype=FLOAT)
        else:
            params[f"W{i}"] = rng.uniform(-bound, bound, (fan_in, fan_out)).astype(FLOAT)
            params[f"b{i}"] = rng.uniform(-bound, bound, fan_out).astype(FLOAT)
    return params


def mlp_arch(params: ParamSet) -> tuple:
    n = len(params) // 2
    return tuple([params["W0"].shape[0]] + [params[f"W{i}"].shape[1] for i in range(n)])


def mlp_param_count(arch) -> int:
    return sum((a + 1) * b for a, b in zip(arch[:-1], arch[1:]))


def mlp_forward(params: ParamSet, x: np.ndarray, keep_cache: bool = False):
    n_layers = len(params) // 2
    if x.ndim != 2 or x.shape[1] != params["W0"].shape[0]:
        raise ShapeError(f"input shape {x.shape} does not match first layer {params['W0'].shape}")
    h = x.astype(params["W0"].dtype, copy=False)
    cache = []
    for i in range(n_layers):
        pre = linear_forward(h, params[f"W{i}"], params[f"b{i}"])
        cache.append((h, pre))
        h = relu(pre) if i < n_layers - 1 else pre
    return (h, cache) if keep_cache else h


def mlp_backward(params: ParamSet, cache, grad_out: np.ndarray):
    """Gradients of all parameters, plus the gradient w.r.t. the input."""
    n_layers = len(params) // 2
    grads = {}
    g = grad_out
    for i in reversed(range(n_layers)):
        h_in, pre = cache[i]
        if i < n_layers - 1:
            g = relu_backward(pre, g)
        g, grads[f"W{i}"], grads[f"b{i}"] = linear_backward(h_in, params[f"W{i}"], g)
    return {k: grads[k] for k in params}, g


def mlp_loss_and_grad(params: ParamSet, batch):
    x, y = batch
    logits, cache = mlp_forward(params, x, keep_cache=True)
    loss, g = softmax_cross_entropy(logits, y)
    grads, _ = mlp_backward(params, cache, g)
    return loss, grads


@dataclass
class LocalModel:
    arch: tuple
    params: ParamSet

    def __post_init__(self):
        self.arch = tuple(int(a) for a in self.arch)
        if mlp_arch(self.params) != self.arch:
            raise ShapeError(f"params describe {mlp_arch(self.params)}, arch says {self.arch}")

    @property
    def num_classes(self) -> int:
        return self.arch[-1]

    @property
    def num_params(self) -> int:
        return param_count(self.params)


def local_forward(model: LocalModel, x: np.ndarray) -> np.ndarray:
    return mlp_forward(model.params, x)


def ensemble_forward(models: list[LocalModel], x: np.ndarray) -> np.ndarray:
    """Stacked logits ``(n, M, C)``; client ``i`` fills ``[:, i, :]``."""
    if not models:
        raise ValueError("empty ensemble")
    C = models[0].num_classes
    if any(m.num_classes != C for m in models):
        raise ShapeError("ensemble members disagree on the number of classes")
    return np.stack([local_forward(m, x) for m in models], axis=1)


# ---------------------------------------------------------------------------
# Linear-in-logits aggregators


def _weighted_sum(Z: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """``sum_i weights[i] * Z[..., i, :]`` with float64 accumulation."""
    out = (Z.astype(np.float64) * weights.astype(np.float64)).sum(axis=-2)
    return out.astype(Z.dtype)


def agg_average(Z: np.ndarray) -> np.ndarray:
    M = Z.shape[-2]
    return _weighted_sum(Z, np.full((M, 1), 1.0 / M, dtype=FLOAT))


def weighted_lambda(label_counts: np.ndarray) -> np.ndarray:
    """Per-client, per-class share of each class's samples.

    A class nobody holds falls back to uniform ``1/M``.
    """
    n = np.asarray(label_counts, dtype=np.float64)
    if n.ndim != 2:
        raise ShapeError("label_counts must be M x C")
    if np.any(n < 0):
        raise ValueError("label counts must be non-negative")
    M = n.shape[0]
    tot = n.sum(axis=0)
    lam = np.where(tot > 0, n / np.where(tot > 0, tot, 1.0), 1.0 / M)
    return lam.astype(FLOAT)


def agg_weighted(Z: np.ndarray, label_counts: np.ndarray) -> np.ndarray:
    return _weighted_sum(Z, weighted_lambda(label_counts))


def agg_linear(Z: np.ndarray, w: np.ndarray) -> np.ndarray:
    if w.shape != (Z.shape[-2],):
        raise ShapeError(f"w must have shape ({Z.shape[-2]},), got {w.shape}")
    return _weighted_sum(Z, w[:, None])


def agg_linear_backward(Z: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Returns ``(grad_w, grad_Z)``."""
    Z3 = Z.reshape((-1,) + Z.shape[-2:]).astype(np.float64)
    g = grad_out.reshape(-1, Z.shape[-1]).astype(np.float64)
    grad_w = np.einsum("nmc,nc->m", Z3, g)
    grad_Z = g[:, None, :] * w.astype(np.float64)[None, :, None]
    return grad_w.astype(w.dtype), grad_Z.reshape(Z.shape).astype(Z.dtype)


def agg_per_class(Z: np.ndarray, lam: np.ndarray) -> np.ndarray:
    if lam.shape != Z.shape[-2:]:
        raise ShapeError(f"lambda must have shape {Z.shape[-2:]}, got {lam.shape}")
    return _weighted_sum(Z, lam)


def agg_per_class_backward(Z: np.ndarray, lam: np.ndarray, grad_out: np.ndarray):
    Z3 = Z.reshape((-1,) + Z.shape[-2:]).astype(np.float64)
    g = grad_out.reshape(-1, Z.shape[-1]).astype(np.float64)
    grad_lam = (Z3 * g[:, None, :]).sum(axis=0)
    grad_Z = g[:, None, :] * lam.astype(np.float64)[None]
    return grad_lam.astype(lam.dtype), grad_Z.reshape(Z.shape).astype(Z.dtype)


# ---------------------------------------------------------------------------
# Two-layer network over concatenated logits


def agg_nn(Z: np.ndarray, W1: np.ndarray, W2: np.ndarray, keep_cache: bool = False):
    M, C = Z.shape[-2:]
    if W1.shape[0] != M * C or W2.shape[0] != W1.shape[1] or W2.shape[1] != C:
        raise ShapeError(f"W1{W1.shape}/W2{W2.shape} incompatible with M={M}, C={C}")
    z = Z.reshape(-1, M * C)
    pre = matmul(z, W1)
    out = matmul(relu(pre), W2)
    out = out.reshape(Z.shape[:-2] + (C,))
    return (out, (z, pre)) if keep_cache else out


def agg_nn_backward(Z: np.ndarray, W1: np.ndarray, W2: np.ndarray, grad_out: np.ndarray, cache=None):
    """Returns ``(grad_W1, grad_W2, grad_Z)``."""
    if cache is None:
        _, cache = agg_nn(Z, W1, W2, keep_cache=True)
    z, pre = cache
    g = grad_out.reshape(-1, W2.shape[1])
    grad_W2 = matmul(relu(pre).T, g).astype(W2.dtype)
    g_pre = relu_backward(pre, matmul(g, W2.T))
    grad_W1 = matmul(z.T, g_pre).astype(W1.dtype)
    grad_Z = matmul(g_pre, W1.T).reshape(Z.shape)
    return grad_W1, grad_W2, grad_Z


def init_nn_aggregator(M: int, C: int, k: int, rng: np.random.Generator) -> ParamSet:
    """Hidden width ``k``; when ``k >= 2C`` the net starts as exact averaging.

    Units ``c`` and ``C + c`` carry ``+mean_i z_i[c]`` and its negation, so
    ``relu(a) - relu(-a)`` reproduces the average.  Remaining units get
    uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) input weights and zero output
    weights.  With ``k < 2C`` both layers are uniformly random.
    """
    if k < 1:
        raise ValueError("hidden width k must be >= 1")
    b1 = 1.0 / np.sqrt(M * C)
    W1 = rng.uniform(-b1, b1, (M * C, k)).astype(FLOAT)
    if k >= 2 * C:
        W2 = np.zeros((k, C), dtype=FLOAT)
        W1[:, : 2 * C] = 0.0
        inv = FLOAT(1.0 / M)
        for i in range(M):
            for c in range(C):
                W1[i * C + c, c] = inv
                W1[i * C + c, C + c] = -inv
        for c in range(C):
            W2[c, c] = 1.0
            W2[C + c, c] = -1.0
    else:
        b2 = 1.0 / np.sqrt(k)
        W2 = rng.uniform(-b2, b2, (k, C)).astype(FLOAT)
    return {"W1": W1, "W2": W2}


# ---------------------------------------------------------------------------
# Mixture of experts


def gating_forward(gating: ParamSet, x: np.ndarray, keep_cache: bool = False):
    logits, cache = mlp_forward(gating, x, keep_cache=True)
    logp = logits.astype(np.float64)
    logp = logp - logp.max(axis=-1, keepdims=True)
    G = np.exp(logp)
    G = (G / G.sum(axis=-1, keepdims=True)).astype(logits.dtype)
    return (G, cache) if keep_cache else G


def agg_moe(x: np.ndarray, gating: ParamSet, Z: np.ndarray, keep_cache: bool = False):
    """``sum_i G(x)_i * Z[i]`` with a softmax-normalised MLP gate on raw features."""
    single = Z.ndim == 2
    if single:
        x, Z = x[None], Z[None]
    if x.shape[0] != Z.shape[0]:
        raise ShapeError("features and logits disagree on batch size")
    G, cache = gating_forward(gating, x, keep_cache=True)
    if G.shape[1] != Z.shape[1]:
        raise ShapeError(f"gate emits {G.shape[1]} weights for {Z.shape[1]} experts")
    out = (G.astype(np.float64)[:, :, None] * Z.astype(np.float64)).sum(axis=1).astype(Z.dtype)
    if single:
        out = out[0]
    return (out, (G, cache)) if keep_cache else out


def agg_moe_backward(x, gating: ParamSet, Z: np.ndarray, grad_out: np.ndarray, cache=None):
    """Gradient w.r.t. the gating parameters only; experts are frozen."""
    if Z.ndim == 2:
        x, Z, grad_out = x[None], Z[None], grad_out[None]
    if cache is None:
        _, cache = agg_moe(x, gating, Z, keep_cache=True)
    G, mlp_cache = cache
    g = grad_out.astype(np.float64)
    dG = np.einsum("nmc,nc->nm", Z.astype(np.float64), g)
    G64 = G.astype(np.float64)
    dlogits = G64 * (dG - (dG * G64).sum(axis=1, keepdims=True))
    grads, _ = mlp_backward(gating, mlp_cache, dlogits.astype(G.dtype))
    return grads


def init_gating(d: int, hidden: int, M: int, rng: np.random.Generator) -> ParamSet:
    # zero output layer: uniform gate, so training starts from averaging
    return init_mlp((d, hidden, M), rng, zero_last=True)


# ---------------------------------------------------------------------------
# Polychotomous voting


def estimate_competency(models: list[LocalModel], shard, eps: float = COMPETENCY_EPS):
    """Per-model confusion matrices on the shard's aggregator split.

    ``P[r, c]`` is the smoothed probability that a model predicts ``c`` when
    the truth is ``r``.  Returns ``(matrices, sample_count)``.
    """
    data = shard.agg_train
    if len(data) == 0:
        raise ValueError("competency estimation needs a non-empty aggregator split")
    C = data.num_classes
    mats = []
    for m in models:
        pred = np.argmax(local_forward(m, data.features), axis=1)
        conf = np.zeros((C, C), dtype=np.float64)
        np.add.at(conf, (data.labels, pred), 1.0)
        P = (conf + eps) / (conf.sum(axis=1, keepdims=True) + C * eps)
        mats.append(P / P.sum(axis=1, keepdims=True))
    return mats, len(data)


def aggregate_competency(contributions) -> list[np.ndarray]:
    """Sample-count weighted mean of each model's matrices, rows renormalised.

    ``contributions`` is a sequence of ``(matrices, count)`` pairs, one per
    reporting client.
    """
    contributions = list(contributions)
    if not contributions:
        raise ValueError("no competency contributions")
    weights = np.asarray([c for _, c in contributions], dtype=np.float64)
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    weights = weights / weights.sum()
    M = len(contributions[0][0])
    out = []
    for i in range(M):
        P = sum(w * np.asarray(mats[i], dtype=np.float64) for w, (mats, _) in zip(weights, contributions))
        out.append(P / P.sum(axis=1, keepdims=True))
    return out


def agg_vote(votes, competency, prior=None, benefit=None) -> int:
    """Expected-utility decision for one input given each client's vote.

    With the default 0/1 benefit this is the MAP class
    ``argmax_c log prior(c) + sum_i log P_i[c, vote_i]``.  Ties go to the
    lowest class index.
    """
    votes = np.asarray(votes, dtype=np.int64)
    C = np.asarray(competency[0]).shape[0]
    if votes.shape != (len(competency),):
        raise ShapeError("one vote per competency matrix required")
    if votes.min() < 0 or votes.max() >= C:
        raise ValueError("vote outside [0, C)")
    prior = np.full(C, 1.0 / C) if prior is None else np.asarray(prior, dtype=np.float64)
    logpost = np.log(prior).copy()
    for P, v in zip(competency, votes):
        logpost += np.log(np.asarray(P, dtype=np.float64)[:, v])
    if benefit is None:
        return int(np.argmax(logpost))
    post = np.exp(logpost - logpost.max())
    post /= post.sum()
    return int(np.argmax(np.asarray(benefit, dtype=np.float64) @ post))


def vote_predict(Z: np.ndarray, competency, prior=None, benefit=None) -> np.ndarray:
    """Batched ``agg_vote``: each client votes for its own argmax class."""
    votes = np.argmax(Z, axis=-1)
    if Z.ndim == 2:
        return np.asarray(agg_vote(votes, competency, prior, benefit))
    return np.asarray([agg_vote(v, competency, prior, benefit) for v in votes], dtype=np.int64)


# ---------------------------------------------------------------------------
# Unified aggregator handle


@dataclass
class AggregatorSpec:
    kind: str
    params: ParamSet = field(default_factory=dict)
    k: int | None = None
    competency: list | None = None
    prior: np.ndarray | None = None
    benefit: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in AGGREGATOR_KINDS:
            raise ValueError(f"unknown aggregator kind {self.kind!r}")

    @property
    def trainable(self) -> bool:
        return self.kind in TRAINABLE_KINDS


def init_aggregator(kind: str, M: int, C: int, rng: np.random.Generator, d: int | None = None,
                    k: int = 40, gate_hidden: int = 32) -> AggregatorSpec:
    """Trainable aggregators start at (or, for ``nn`` with ``k < 2C``, near)
    the uniform average."""
    if kind == "average":
        return AggregatorSpec(kind)
    if kind == "linear":
        return AggregatorSpec(kind, {"w": np.full(M, 1.0 / M, dtype=FLOAT)})
    if kind == "per_class":
        return AggregatorSpec(kind, {"lambda": np.full((M, C), 1.0 / M, dtype=FLOAT)})
    if kind == "nn":
        return AggregatorSpec(kind, init_nn_aggregator(M, C, k, rng), k=k)
    if kind == "moe":
        if d is None:
            raise ValueError("moe gating needs the input dimension d")
        return AggregatorSpec(kind, init_gating(d, gate_hidden, M, rng))
    raise ValueError(f"{kind!r} is not initialised here; build it with fit_static")


def aggregator_forward(kind: str, params: ParamSet, Z: np.ndarray, x=None, keep_cache=False):
    if kind == "average":
        out, cache = agg_average(Z), None
    elif kind in ("weighted_average", "per_class"):
        out, cache = agg_per_class(Z, params["lambda"]), None
    elif kind == "linear":
        out, cache = agg_linear(Z, params["w"]), None
    elif kind == "nn":
        out, cache = agg_nn(Z, params["W1"], params["W2"], keep_cache=True)
    elif kind == "moe":
        if x is None:
            raise ValueError("moe aggregation needs the raw input")
        out, cache = agg_moe(x, params, Z, keep_cache=True)
    else:
        raise ValueError(f"{kind!r} has no logit output")
    return (out, cache) if keep_cache else out


def aggregator_backward(kind: str, params: ParamSet, Z, x, grad_out, cache=None) -> ParamSet:
    if kind == "linear":
        return {"w": agg_linear_backward(Z, params["w"], grad_out)[0]}
    if kind == "per_class":
        return {"lambda": agg_per_class_backward(Z, params["lambda"], grad_out)[0]}
    if kind == "nn":
        gW1, gW2, _ = agg_nn_backward(Z, params["W1"], params["W2"], grad_out, cache)
        return {"W1": gW1, "W2": gW2}
    if kind == "moe":
        return agg_moe_backward(x, params, Z, grad_out, cache)
    raise ValueError(f"{kind!r} is not trainable")


def aggregator_loss_and_grad(kind: str, params: ParamSet, Z, x, y):
    out, cache = aggregator_forward(kind, params, Z, x, keep_cache=True)
    loss, g = softmax_cross_entropy(out, y)
    return loss, aggregator_backward(kind, params, Z, x, g, cache)


def aggregate(spec: AggregatorSpec, Z: np.ndarray, x=None) -> np.ndarray:
    """Aggregated logits ``(n, C)``; not defined for voting."""
    if spec.kind == "vote":
        raise ValueError("voting returns classes, not logits")
    return aggregator_forward(spec.kind, spec.params, Z, x)


def aggregate_predict(spec: AggregatorSpec, Z: np.ndarray, x=None) -> np.ndarray:
    if spec.kind == "vote":
        return vote_predict(Z, spec.competency, spec.prior, spec.benefit)
    return np.argmax(aggregate(spec, Z, x), axis=-1)
