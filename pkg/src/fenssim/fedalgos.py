"""Iterative FL: client local updates and server strategies."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ledger import CommLedger
from .models import mlp_loss_and_grad
from .numerics import (
    FLOAT,
    ParamSet,
    check_mirror,
    copy_params,
    flatten,
    init_optimizer,
    adaptive_step,
    mean_params,
    sgd_step,
    unflatten,
)
from .quantize import payload_bytes
from .rng import stream

log = logging.getLogger(__name__)

ALGORITHMS = ("fedavg", "fedprox", "fedadam", "fedyogi", "fedavg_stc")


@dataclass
class FedConfig:
    rounds: int = 50
    local_steps: int | None = None
    local_epochs: int | None = 2
    batch_size: int = 16
    client_lr: float = 0.01
    server_lr: float = 1.0
    participation: float = 1.0
    prox_mu: float = 0.0
    algorithm: str = "fedavg"
    seed: int = 0
    weighted: bool = False
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3
    stc_sparsity: float = 0.5
    stc_bits: int = 16
    stc_strict: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: unknown {self.algorithm!r}, expected one of {ALGORITHMS}")
        if self.rounds < 0:
            raise ValueError("rounds: must be >= 0")
        if self.local_steps is None and self.local_epochs is None:
            raise ValueError("local_steps/local_epochs: one must be set")
        if self.local_steps is not None and self.local_steps < 0:
            raise ValueError("local_steps: must be >= 0")
        if self.local_epochs is not None and self.local_epochs < 0:
            raise ValueError("local_epochs: must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size: must be >= 1")
        if self.prox_mu < 0:
            raise ValueError("prox_mu: must be >= 0")
        if not 0 < self.participation <= 1:
            raise ValueError("participation: must lie in (0, 1]")
        if not 0 < self.stc_sparsity < 1:
            raise ValueError("stc_sparsity: must lie in (0, 1)")

    def steps_for(self, n: int) -> int:
        if self.local_steps is not None:
            return self.local_steps
        return math.ceil(n / self.batch_size) * self.local_epochs


def batch_indices(n: int, batch_size: int, steps: int, rng: np.random.Generator):
    """``steps`` mini-batches; a fresh permutation every pass over the data."""
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos >= n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


def client_local_update(start: ParamSet, data, cfg: FedConfig, loss_and_grad: Callable = mlp_loss_and_grad,
                        rng: np.random.Generator | None = None, steps: int | None = None, lr=None) -> ParamSet:
    """Mini-batch SGD from ``start`` on ``data`` (a ``Dataset``).

    ``lr`` may be a float or a callable ``step -> lr``.  A positive
    ``cfg.prox_mu`` adds the FedProx term ``mu/2 * ||theta - start||^2``.
    """
    n = len(data)
    K = cfg.steps_for(n) if steps is None else steps
    if K == 0:
        return copy_params(start)
    if n == 0:
        raise ValueError("local update needs data when steps > 0")
    if rng is None:
        rng = stream(cfg.seed, "client-update")
    lr = cfg.client_lr if lr is None else lr
    params = copy_params(start)
    for t, idx in enumerate(batch_indices(n, cfg.batch_size, K, rng)):
        _, grads = loss_and_grad(params, (data.features[idx], data.labels[idx]))
        if cfg.prox_mu > 0:
            mu = FLOAT(cfg.prox_mu)
            grads = {k: g + mu * (params[k] - start[k]) for k, g in grads.items()}
        step_lr = lr(t) if callable(lr) else lr
        params = sgd_step(params, grads, step_lr)
    return params


# ---------------------------------------------------------------------------
# Compression


@dataclass
class CompressedDelta:
    shapes: ParamSet  # zero templates carrying names and shapes
    indices: np.ndarray
    codes: np.ndarray
    scale: float
    bits: int
    wire_bytes: int


def stc_compress(delta: ParamSet, sparsity: float = 0.5, bits: int = 16, strict: bool = False) -> CompressedDelta:
    """Top-k magnitude sparsification followed by symmetric ``bits``-bit codes.

    Keeps ``ceil((1 - sparsity) * n)`` coordinates (ties to the lower flat
    index), minus any that are exactly zero.  Wire size counts only the
    value payload unless ``strict``, which adds per-entry indices and the
    scale.
    """
    if not 0 < sparsity < 1:
        raise ValueError("sparsity must lie in (0, 1)")
    flat = flatten(delta).astype(np.float64)
    n = flat.size
    k = math.ceil((1 - sparsity) * n)
    order = np.lexsort((np.arange(n), -np.abs(flat)))
    keep = np.sort(order[:k])
    keep = keep[flat[keep] != 0]
    levels = 2 ** (bits - 1) - 1
    amax = float(np.abs(flat[keep]).max()) if keep.size else 0.0
    scale = amax / levels if amax > 0 else 1.0
    codes = np.rint(flat[keep] / scale).astype(np.int64)
    nbytes = keep.size * bits // 8
    if strict:
        index_bits = max(1, math.ceil(math.log2(max(n, 2))))
        nbytes += math.ceil(keep.size * index_bits / 8) + 4
    templates = {name: np.zeros_like(v) for name, v in delta.items()}
    return CompressedDelta(templates, keep, codes, scale, bits, nbytes)


def stc_decompress(cd: CompressedDelta) -> ParamSet:
    total = sum(v.size for v in cd.shapes.values())
    flat = np.zeros(total, dtype=np.float64)
    flat[cd.indices] = cd.codes * cd.scale
    return unflatten(flat.astype(FLOAT), cd.shapes)


# ---------------------------------------------------------------------------
# Server side


@dataclass
class ClientUpdate:
    client_id: int
    params: ParamSet
    sample_count: int
    bytes: int
    payload: object = None


def server_fedavg(updates: list[ClientUpdate], weighted: bool = False) -> ParamSet:
    if not updates:
        raise ValueError("no client updates to aggregate")
    weights = [u.sample_count for u in updates] if weighted else None
    return mean_params([u.params for u in updates], weights)


def server_adaptive(state, broadcast: ParamSet, updates: list[ClientUpdate], weighted: bool = False):
    """FedAdam / FedYogi: step along ``mean(updates) - broadcast``."""
    avg = server_fedavg(updates, weighted)
    check_mirror(avg, broadcast)
    delta = {k: (avg[k].astype(np.float64) - broadcast[k].astype(np.float64)).astype(FLOAT) for k in avg}
    return adaptive_step(state, delta, broadcast)


def select_clients(M: int, participation: float, seed: int, round_idx: int) -> list[int]:
    if participation >= 1:
        return list(range(M))
    size = max(1, round(participation * M))
    picked = stream(seed, "participation", round_idx).choice(M, size=size, replace=False)
    return sorted(int(i) for i in picked)


def run_fl(init: ParamSet, datasets: list, cfg: FedConfig, loss_and_grad: Callable = mlp_loss_and_grad,
           evaluate: Callable | None = None, ledger: CommLedger | None = None, threads: int = 1,
           phase_names=("fl_up", "fl_down"), stream_name: str = "fl"):
    """Run ``cfg.rounds`` rounds of broadcast, local update and aggregation.

    ``evaluate(params) -> accuracy`` is called before the first round and
    after each round.  Returns ``(params, metrics, ledger)`` where metrics
    is a list of dicts with ``round``, ``val_accuracy``, ``cum_up_bytes``
    and ``cum_down_bytes``.  Client results are reduced in client-id order,
    so ``threads`` never changes the outcome.
    """
    M = len(datasets)
    ledger = ledger if ledger is not None else CommLedger(M)
    up_phase, down_phase = phase_names
    params = copy_params(init)
    model_bytes = payload_bytes(params)
    server_state = None
    if cfg.algorithm in ("fedadam", "fedyogi"):
        server_state = init_optimizer(cfg.algorithm[3:], params, cfg.server_lr, cfg.beta1, cfg.beta2, cfg.tau)

    def cum(phase):
        return ledger.phase_total(phase)

    metrics = []
    if evaluate is not None:
        metrics.append(dict(round=0, val_accuracy=evaluate(params), cum_up_bytes=cum(up_phase),
                            cum_down_bytes=cum(down_phase)))

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for t in range(cfg.rounds):
            chosen = select_clients(M, cfg.participation, cfg.seed, t)
            broadcast = params

            def work(cid, broadcast=broadcast, t=t):
                rng = stream(cfg.seed, stream_name, t, cid)
                new = client_local_update(broadcast, datasets[cid], cfg, loss_and_grad, rng)
                if cfg.algorithm == "fedavg_stc":
                    delta = {k: new[k] - broadcast[k] for k in new}
                    cd = stc_compress(delta, cfg.stc_sparsity, cfg.stc_bits, cfg.stc_strict)
                    rec = stc_decompress(cd)
                    new = {k: broadcast[k] + rec[k] for k in rec}
                    return ClientUpdate(cid, new, len(datasets[cid]), cd.wire_bytes, cd)
                return ClientUpdate(cid, new, len(datasets[cid]), payload_bytes(new))

            updates = list(pool.map(work, chosen)) if pool else [work(c) for c in chosen]
            for u in updates:
                ledger.record(u.client_id, down_phase, model_bytes)
                ledger.record(u.client_id, up_phase, u.bytes)
            if server_state is not None:
                params, server_state = server_adaptive(server_state, broadcast, updates, cfg.weighted)
            else:
                params = server_fedavg(updates, cfg.weighted)
            if evaluate is not None:
                acc = evaluate(params)
                metrics.append(dict(round=t + 1, val_accuracy=acc, cum_up_bytes=cum(up_phase),
                                    cum_down_bytes=cum(down_phase)))
                log.debug("round %d: val acc %.4f", t + 1, acc)
    finally:
        if pool:
            pool.shutdown()
    return params, metrics, ledger
