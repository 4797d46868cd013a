"""Two-phase FENS protocol: one-shot local training, then federated
training of an aggregator over the frozen ensemble."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard, Dataset
from .fedalgos import FedConfig, client_local_update, run_fl
from .ledger import CommLedger
from .models import (
    STATIC_KINDS,
    TRAINABLE_KINDS,
    AggregatorSpec,
    LocalModel,
    aggregate,
    aggregate_competency,
    aggregate_predict,
    aggregator_loss_and_grad,
    ensemble_forward,
    estimate_competency,
    init_aggregator,
    init_mlp,
    local_forward,
    mlp_backward,
    mlp_forward,
    weighted_lambda,
)
from .numerics import FLOAT, ParamSet, cosine_anneal, log_softmax, params_hash, sgd_step
from .quantize import dequantize, payload_bytes, quantize_params
from .rng import stream

log = logging.getLogger(__name__)


def default_agg_fl() -> FedConfig:
    return FedConfig(rounds=200, local_steps=1, local_epochs=None, batch_size=128,
                     client_lr=0.1, server_lr=0.01, algorithm="fedadam")


@dataclass
class FensConfig:
    hidden: tuple = (64,)
    local_epochs: int = 30
    local_lr: float = 0.05
    local_batch: int = 16
    cosine: bool = True
    quantize: bool = True
    aggregator: str = "nn"
    k: int = 40
    gate_hidden: int = 32
    agg_fl: FedConfig = field(default_factory=default_agg_fl)
    split_frac: float = 0.9
    seed: int = 0
    cache_logits: bool = False
    count_init_download: bool = False

    def __post_init__(self):
        if self.local_epochs < 1:
            raise ValueError("local_epochs: must be >= 1")
        if self.aggregator not in STATIC_KINDS + TRAINABLE_KINDS:
            raise ValueError(f"aggregator: unknown kind {self.aggregator!r}")
        self.hidden = tuple(int(h) for h in self.hidden)
        self.agg_fl.validate()


@dataclass
class GlobalModel:
    ensemble: list
    aggregator: AggregatorSpec

    def logits(self, x: np.ndarray) -> np.ndarray:
        return aggregate(self.aggregator, ensemble_forward(self.ensemble, x), x)


def global_predict(gm: GlobalModel, x: np.ndarray) -> np.ndarray:
    """Predicted classes; ``argmax`` ties resolve to the lowest index."""
    single = x.ndim == 1
    x2 = x[None] if single else x
    pred = aggregate_predict(gm.aggregator, ensemble_forward(gm.ensemble, x2), x2)
    return pred[0] if single else pred


def accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(pred) == np.asarray(labels)))


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------------------
# Phase 1


def train_local(start: ParamSet, data: Dataset, epochs: int, lr: float, batch: int, cosine: bool,
                rng: np.random.Generator) -> ParamSet:
    """SGD for ``epochs`` passes; the learning rate is cosine annealed per epoch."""
    steps_per_epoch = math.ceil(len(data) / batch)
    cfg = FedConfig(rounds=1, local_steps=steps_per_epoch * epochs, local_epochs=None, batch_size=batch)

    def schedule(t):
        return cosine_anneal(lr, t // steps_per_epoch, epochs) if cosine else lr

    return client_local_update(start, data, cfg, rng=rng, lr=schedule)


def phase1(shards: list[ClientShard], cfg: FensConfig, ledger: CommLedger | None = None, threads: int = 1):
    """Every client trains the shared initial model on its local split and
    uploads it once."""
    d = shards[0].local_train.dim
    C = shards[0].local_train.num_classes
    arch = (d,) + cfg.hidden + (C,)
    theta0 = init_mlp(arch, stream(cfg.seed, "init"))
    ledger = ledger if ledger is not None else CommLedger(len(shards))

    def work(shard):
        if len(shard.local_train) == 0:
            raise ValueError(f"client {shard.client_id} has no local training data")
        rng = stream(cfg.seed, "local-train", shard.client_id)
        return LocalModel(arch, train_local(theta0, shard.local_train, cfg.local_epochs, cfg.local_lr,
                                            cfg.local_batch, cfg.cosine, rng))

    models = _map(work, shards, threads)
    for shard, m in zip(shards, models):
        if cfg.count_init_download:
            ledger.record(shard.client_id, "phase0_down", payload_bytes(theta0))
        ledger.record(shard.client_id, "phase1_up", payload_bytes(m.params))
    return models, ledger


def broadcast_ensemble(models: list[LocalModel], quantize: bool, ledger: CommLedger | None = None):
    """Ship all M models to every client, optionally INT8-quantised.

    Returns the ensemble as clients reconstruct it and the ledger.
    """
    M = len(models)
    ledger = ledger if ledger is not None else CommLedger(M)
    if quantize:
        shipped = [quantize_params(m.params) for m in models]
        ensemble = [LocalModel(m.arch, dequantize(q)) for m, q in zip(models, shipped)]
    else:
        shipped = [m.params for m in models]
        ensemble = [LocalModel(m.arch, {k: v.copy() for k, v in m.params.items()}) for m in models]
    per_client = sum(payload_bytes(s) for s in shipped)
    for cid in range(ledger.num_clients):
        ledger.record(cid, "phase1_down", per_client)
    return ensemble, ledger, shipped


# ---------------------------------------------------------------------------
# Aggregator fitting


class AggregatorTask:
    """Loss/gradient of a trainable aggregator over a frozen ensemble.

    With ``cache`` the client datasets carry precomputed logits appended to
    their features (see ``client_data``); otherwise logits are recomputed
    for every batch.  Both paths produce identical numbers.
    """

    def __init__(self, ensemble: list[LocalModel], kind: str, cache: bool = False):
        self.ensemble = ensemble
        self.kind = kind
        self.cache = cache
        self.d = ensemble[0].arch[0]
        self.M = len(ensemble)
        self.C = ensemble[0].num_classes

    def client_data(self, ds: Dataset) -> Dataset:
        if not self.cache:
            return ds
        Z = ensemble_forward(self.ensemble, ds.features).reshape(len(ds), -1)
        return Dataset(np.concatenate([ds.features, Z], axis=1), ds.labels, ds.num_classes)

    def split(self, feats: np.ndarray):
        if self.cache:
            x = feats[:, : self.d]
            return x, feats[:, self.d :].reshape(-1, self.M, self.C)
        return feats, ensemble_forward(self.ensemble, feats)

    def __call__(self, params: ParamSet, batch):
        feats, y = batch
        x, Z = self.split(feats)
        return aggregator_loss_and_grad(self.kind, params, Z, x, y)


def ensemble_fingerprint(models: list[LocalModel]) -> list[str]:
    return [params_hash(m.params) for m in models]


def phase2(ensemble: list[LocalModel], shards: list[ClientShard], cfg: FensConfig,
           ledger: CommLedger | None = None, val: Dataset | None = None, threads: int = 1):
    """Federated training of the aggregator on every client's held-out split.

    Returns ``(spec, metrics, ledger)``; metrics are empty without ``val``.
    """
    kind = cfg.aggregator
    if kind not in TRAINABLE_KINDS:
        raise ValueError(f"aggregator {kind!r} is not trainable")
    M, C, d = len(ensemble), ensemble[0].num_classes, ensemble[0].arch[0]
    spec = init_aggregator(kind, M, C, stream(cfg.seed, "aggregator-init"), d=d, k=cfg.k,
                           gate_hidden=cfg.gate_hidden)
    task = AggregatorTask(ensemble, kind, cfg.cache_logits)
    datasets = [task.client_data(s.agg_train) for s in shards]
    evaluate = None
    if val is not None:
        Zval = ensemble_forward(ensemble, val.features)

        def evaluate(params):
            out = AggregatorSpec(kind, params, k=spec.k)
            return accuracy(aggregate_predict(out, Zval, val.features), val.labels)

    before = ensemble_fingerprint(ensemble)
    fl_cfg = FedConfig(**{**cfg.agg_fl.__dict__, "seed": cfg.seed})
    params, metrics, ledger = run_fl(spec.params, datasets, fl_cfg, task, evaluate, ledger, threads,
                                     phase_names=("phase2_up", "phase2_down"), stream_name="phase2")
    if ensemble_fingerprint(ensemble) != before:
        raise AssertionError("frozen ensemble changed during aggregator training")
    return AggregatorSpec(kind, params, k=spec.k), metrics, ledger


def fit_static(ensemble: list[LocalModel], shards: list[ClientShard], kind: str,
               ledger: CommLedger | None = None) -> AggregatorSpec:
    """Averaging, label-count weighting, or competency-based voting."""
    M = len(ensemble)
    C = ensemble[0].num_classes
    ledger = ledger if ledger is not None else CommLedger(len(shards))
    if kind == "average":
        return AggregatorSpec("average")
    if kind == "weighted_average":
        counts = np.stack([s.local_train.label_counts() for s in shards])
        for s in shards:
            ledger.record(s.client_id, "static_up", C * 4)
        return AggregatorSpec("weighted_average", {"lambda": weighted_lambda(counts)})
    if kind == "vote":
        contributions = []
        for s in shards:
            contributions.append(estimate_competency(ensemble, s))
            ledger.record(s.client_id, "static_up", M * C * C * 4)
        return AggregatorSpec("vote", competency=aggregate_competency(contributions),
                              prior=np.full(C, 1.0 / C))
    raise ValueError(f"{kind!r} is not a static aggregation rule")


# ---------------------------------------------------------------------------
# Full run


@dataclass
class FensResult:
    local_models: list
    global_model: GlobalModel
    metrics: list
    ledger: CommLedger
    val_accuracy: float
    test_accuracy: float
    round0_val_accuracy: float | None = None


def run_fens(shards: list[ClientShard], val: Dataset, test: Dataset, cfg: FensConfig,
             threads: int = 1) -> FensResult:
    ledger = CommLedger(len(shards))
    models, _ = phase1(shards, cfg, ledger, threads)
    ensemble, _, _ = broadcast_ensemble(models, cfg.quantize, ledger)
    metrics = []
    if cfg.aggregator in TRAINABLE_KINDS:
        spec, metrics, _ = phase2(ensemble, shards, cfg, ledger, val, threads)
    else:
        spec = fit_static(ensemble, shards, cfg.aggregator, ledger)
    gm = GlobalModel(ensemble, spec)
    val_acc = accuracy(global_predict(gm, val.features), val.labels)
    test_acc = accuracy(global_predict(gm, test.features), test.labels)
    r0 = metrics[0]["val_accuracy"] if metrics else None
    return FensResult(models, gm, metrics, ledger, val_acc, test_acc, r0)


# ---------------------------------------------------------------------------
# Distillation


@dataclass
class DistillConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 64
    temperature: float = 1.0
    seed: int = 0
    cosine: bool = True


def kd_loss_and_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, T: float = 1.0):
    """``T^2 * KL(softmax(teacher/T) || softmax(student/T))`` averaged over
    the batch, with its gradient w.r.t. the student logits."""
    n = student_logits.shape[0]
    logp = log_softmax(teacher_logits.astype(np.float64) / T)
    logq = log_softmax(student_logits.astype(np.float64) / T)
    p = np.exp(logp)
    loss = float(T * T * (p * (logp - logq)).sum() / n)
    grad = T * (np.exp(logq) - p) / n
    return loss, grad.astype(student_logits.dtype)


def distill(gm: GlobalModel, aux_x: np.ndarray, student_arch, recipe: DistillConfig | None = None,
            init: ParamSet | None = None) -> LocalModel:
    """Train one MLP to mimic the global model's aggregated logits on ``aux_x``."""
    recipe = recipe or DistillConfig()
    if gm.aggregator.kind == "vote":
        raise ValueError("a voting aggregator has no logits to distil")
    if len(aux_x) == 0:
        raise ValueError("auxiliary set is empty")
    teacher = gm.logits(aux_x)
    student_arch = tuple(student_arch)
    params = init if init is not None else init_mlp(student_arch, stream(recipe.seed, "student-init"))
    params = {k: v.copy() for k, v in params.items()}
    rng = stream(recipe.seed, "distill")
    n = len(aux_x)
    steps_per_epoch = math.ceil(n / recipe.batch_size)
    for epoch in range(recipe.epochs):
        lr = cosine_anneal(recipe.lr, epoch, recipe.epochs) if recipe.cosine else recipe.lr
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * recipe.batch_size : (s + 1) * recipe.batch_size]
            out, cache = mlp_forward(params, aux_x[idx], keep_cache=True)
            _, g = kd_loss_and_grad(out, teacher[idx], recipe.temperature)
            grads, _ = mlp_backward(params, cache, g)
            params = sgd_step(params, grads, lr)
    return LocalModel(student_arch, params)


def distill_loss(gm: GlobalModel, student: LocalModel, aux_x: np.ndarray, T: float = 1.0) -> float:
    return kd_loss_and_grad(local_forward(student, aux_x), gm.logits(aux_x), T)[0]


# ---------------------------------------------------------------------------
# Ledger reporting


def ledger_closed_form(upload: int, shipped: list[int], rounds: int, agg_bytes: int, static: int = 0) -> int:
    """Per-client bytes: one upload, the ensemble download, ``rounds``
    aggregator exchanges in both directions, and any static-fit payload."""
    return upload + sum(shipped) + 2 * rounds * agg_bytes + static


def ledger_report(ledger: CommLedger, fl_rounds: int = 0, fl_model_bytes: int | None = None,
                  baselines: dict | None = None) -> dict:
    """Per-phase totals and cost ratios.

    One-shot FL costs one FP32 model upload per client (the mean
    ``phase1_up``).  Iterative FL costs ``2 * fl_rounds * fl_model_bytes``
    per client.  ``baselines`` maps extra names to per-client byte counts.
    """
    M = ledger.num_clients
    phases = ledger.phases()
    per_client = ledger.mean_client_total()
    ofl = ledger.phase_total("phase1_up") / M
    report = {
        "phase_totals": {p: ledger.phase_total(p) for p in phases},
        "per_client_mean": {p: ledger.phase_total(p) / M for p in phases},
        "fens_per_client": per_client,
        "ofl_per_client": ofl,
        "fens_over_ofl": per_client / ofl if ofl else math.inf,
    }
    if "phase0_down" in phases:
        init = ledger.phase_total("phase0_down") / M
        report["fens_over_ofl_with_init"] = per_client / (ofl + init)
    if fl_rounds:
        b = fl_model_bytes if fl_model_bytes is not None else ofl
        fl = 2 * fl_rounds * b
        report["fl_per_client"] = fl
        report["fl_over_fens"] = fl / per_client
    for name, cost in (baselines or {}).items():
        report[f"fens_over_{name}"] = per_client / cost
    return report
