"""Dense-network training primitives.

Tensors are plain ``numpy`` arrays.  Parameters live in float32; every
reduction (matrix products, loss means) accumulates in float64 and the
result is cast back to the dtype of the inputs.  Passing float64 arrays
therefore runs the same code path in full double precision, which is what
the gradient checker relies on.

A ``ParamSet`` is an insertion-ordered ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

FLOAT = np.float32

ParamSet = Dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# ParamSet helpers


def param_count(params: ParamSet) -> int:
    return int(sum(v.size for v in params.values()))


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: ParamSet) -> ParamSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def cast_params(params: ParamSet, dtype) -> ParamSet:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def check_mirror(a: ParamSet, b: ParamSet) -> None:
    if list(a) != list(b):
        raise ShapeError(f"parameter names differ: {list(a)} vs {list(b)}")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ShapeError(f"shape mismatch for {k!r}: {a[k].shape} vs {b[k].shape}")


def flatten(params: ParamSet) -> np.ndarray:
    if not params:
        return np.zeros(0, dtype=FLOAT)
    return np.concatenate([v.ravel() for v in params.values()])


def unflatten(flat: np.ndarray, like: ParamSet) -> ParamSet:
    out, offset = {}, 0
    for k, v in like.items():
        out[k] = np.asarray(flat[offset : offset + v.size], dtype=v.dtype).reshape(v.shape)
        offset += v.size
    if offset != flat.size:
        raise ShapeError(f"flat vector has {flat.size} entries, expected {offset}")
    return out


def params_hash(params: ParamSet) -> str:
    """SHA-256 over names, shapes and raw bytes; used for freeze checks."""
    h = hashlib.sha256()
    for k, v in params.items():
        h.update(k.encode())
        h.update(repr(v.shape).encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def mean_params(sets: list[ParamSet], weights=None) -> ParamSet:
    """Coordinate-wise (optionally weighted) mean, accumulated in float64."""
    if not sets:
        raise ValueError("cannot average an empty collection")
    for s in sets[1:]:
        check_mirror(sets[0], s)
    if weights is None:
        w = np.full(len(sets), 1.0 / len(sets))
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (len(sets),) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be non-negative with a positive sum")
        w = w / w.sum()
    out = {}
    for k, ref in sets[0].items():
        acc = np.zeros(ref.shape, dtype=np.float64)
        for wi, s in zip(w, sets):
            acc += wi * s[k].astype(np.float64)
        out[k] = acc.astype(ref.dtype)
    return out


# ---------------------------------------------------------------------------
# Layers


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out_dtype = np.result_type(a.dtype, b.dtype)
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(out_dtype)


def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim != 2 or W.ndim != 2 or b.shape != (W.shape[1],):
        raise ShapeError(f"bad shapes for linear layer: x{x.shape} W{W.shape} b{b.shape}")
    y = matmul(x, W)
    return y + b.astype(y.dtype)


def linear_backward(x: np.ndarray, W: np.ndarray, grad_y: np.ndarray):
    """Returns ``(grad_x, grad_W, grad_b)`` for ``y = xW + b``."""
    grad_x = matmul(grad_y, W.T)
    grad_W = matmul(x.T, grad_y).astype(W.dtype)
    grad_b = grad_y.astype(np.float64).sum(axis=0).astype(W.dtype)
    return grad_x, grad_W, grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_y: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(x > 0, grad_y, 0).astype(grad_y.dtype, copy=False)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits)).astype(logits.dtype)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. ``logits``.

    The loss is returned as a Python float (float64); the gradient has the
    dtype of ``logits``.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    n, C = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C})")
    logp = log_softmax(logits)
    rows = np.arange(n)
    loss = float(-logp[rows, labels].mean())
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# Optimisers and schedules


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    check_mirror(params, grads)
    return {k: (p - p.dtype.type(lr) * grads[k].astype(p.dtype)) for k, p in params.items()}


def cosine_anneal(lr0: float, t: int, T: int) -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / T))


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    first_moment: ParamSet = field(default_factory=dict)
    second_moment: ParamSet = field(default_factory=dict)
    step_count: int = 0


def init_optimizer(kind: str, params: ParamSet, lr: float, beta1=0.9, beta2=0.99, tau=1e-3) -> OptimizerState:
    if kind not in ("sgd", "adam", "yogi"):
        raise ValueError(f"unknown optimizer kind {kind!r}")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return OptimizerState(kind, lr, beta1, beta2, tau, zeros_like(params), zeros_like(params), 0)


def adaptive_step(state: OptimizerState, delta: ParamSet, params: ParamSet):
    """One server-side Adam/Yogi step along the pseudo-gradient ``delta``.

    No bias correction; ``tau`` floors the denominator.  Returns the new
    parameters and a new state; inputs are not modified.
    """
    if state.kind not in ("adam", "yogi"):
        raise ValueError(f"adaptive_step needs adam or yogi, got {state.kind!r}")
    if state.tau <= 0:
        raise ValueError("tau must be positive")
    check_mirror(params, delta)
    check_mirror(params, state.first_moment)
    b1, b2 = state.beta1, state.beta2
    m_new, v_new, p_new = {}, {}, {}
    for k, p in params.items():
        d = delta[k].astype(np.float64)
        m = b1 * state.first_moment[k].astype(np.float64) + (1 - b1) * d
        v = state.second_moment[k].astype(np.float64)
        d2 = d * d
        if state.kind == "adam":
            v = b2 * v + (1 - b2) * d2
        else:
            v = v - (1 - b2) * d2 * np.sign(v - d2)
            v = np.maximum(v, 0.0)
        step = state.lr * m / (np.sqrt(v) + state.tau)
        p_new[k] = (p.astype(np.float64) + step).astype(p.dtype)
        m_new[k] = m.astype(p.dtype)
        v_new[k] = v.astype(p.dtype)
    new_state = OptimizerState(
        state.kind, state.lr, b1, b2, state.tau, m_new, v_new, state.step_count + 1
    )
    return p_new, new_state


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(
    loss_and_grad: Callable,
    params: ParamSet,
    batch=None,
    eps: float = 1e-4,
    max_coords: int = 256,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params, batch)`` must return ``(loss, grads)``.  Params
    are promoted to float64 first.  Sets with more than 1000 scalars are
    checked on ``max_coords`` random coordinates.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p64 = cast_params(params, np.float64)
    total = param_count(p64)
    if total == 0:
        return 0.0
    loss, grads = loss_and_grad(p64, batch)
    if not np.isfinite(loss):
        raise NonFiniteError("loss is not finite")
    coords = [(k, i) for k, v in p64.items() for i in range(v.size)]
    if total > 1000:
        pick = np.random.default_rng(seed).choice(total, size=min(max_coords, total), replace=False)
        coords = [coords[j] for j in sorted(pick)]
    worst = 0.0
    for k, i in coords:
        flat = p64[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + eps
        lp, _ = loss_and_grad(p64, batch)
        flat[i] = orig - eps
        lm, _ = loss_and_grad(p64, batch)
        flat[i] = orig
        if not (np.isfinite(lp) and np.isfinite(lm)):
            raise NonFiniteError(f"loss not finite around {k}[{i}]")
        num = (lp - lm) / (2 * eps)
        ana = float(np.asarray(grads[k], dtype=np.float64).reshape(-1)[i])
        denom = max(abs(num), abs(ana), 1e-8)
        worst = max(worst, abs(num - ana) / denom)
    return worst
