"""Experiment driver: builds data from a config, runs one protocol per seed
and writes metrics, summaries, ledgers and model files."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as modelio
from .config import ExperimentConfig, serialize
from .data import Dataset, PartitionSpec, dirichlet_partition, gen_synthetic, load_csv, make_shards, split_eval
from .fedalgos import FedConfig, run_fl
from .fens import DistillConfig, FensConfig, accuracy, distill, global_predict, run_fens, train_local
from .ledger import CommLedger
from .models import init_mlp, mlp_forward
from .quantize import quantize_params
from .rng import stream

log = logging.getLogger(__name__)

METRICS_VERSION = "# fens-metrics v1"
METRICS_COLUMNS = ("round", "algorithm", "alpha", "seed", "val_accuracy", "cum_up_bytes", "cum_down_bytes")


@dataclass
class SeedResult:
    seed: int
    test_accuracy: float
    val_accuracy: float
    bytes_per_client: float
    metrics: list
    ledger: CommLedger
    algorithm: str
    extra: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)


def build_data(cfg: ExperimentConfig, seed: int):
    """``(train, val, test)`` for one seed."""
    if cfg["data.source"] == "csv":
        train = load_csv(cfg["data.train_csv"])
        held = load_csv(cfg["data.test_csv"])
    else:
        C, d, sep = cfg["data.classes"], cfg["data.dim"], cfg["data.separation"]
        train = gen_synthetic(C, d, cfg["data.train_per_class"], sep, seed)
        held = gen_synthetic(C, d, cfg["data.test_per_class"], sep, seed + 1_000_003)
    val, test = split_eval(held, seed)
    return train, val, test


def build_parts(cfg: ExperimentConfig, train: Dataset, seed: int):
    spec = PartitionSpec(cfg["partition.alpha"], cfg["partition.clients"], seed)
    return dirichlet_partition(train, spec, cfg["partition.min_size"])


def fens_config(cfg: ExperimentConfig, seed: int) -> FensConfig:
    agg = FedConfig(rounds=cfg["agg.rounds"], local_steps=cfg["agg.local_steps"], local_epochs=None,
                    batch_size=cfg["agg.batch_size"], client_lr=cfg["agg.client_lr"],
                    server_lr=cfg["agg.server_lr"], algorithm=cfg["agg.algorithm"], seed=seed)
    return FensConfig(hidden=cfg["local.hidden"], local_epochs=cfg["local.epochs"], local_lr=cfg["local.lr"],
                      local_batch=cfg["local.batch_size"], cosine=cfg["local.cosine"],
                      quantize=cfg["fens.quantize"], aggregator=cfg["fens.aggregator"], k=cfg["fens.k"],
                      gate_hidden=cfg["fens.gate_hidden"], agg_fl=agg, split_frac=cfg["fens.split_frac"],
                      seed=seed, cache_logits=cfg["fens.cache_logits"],
                      count_init_download=cfg["fens.count_init_download"])


def fl_config(cfg: ExperimentConfig, seed: int, **overrides) -> FedConfig:
    kw = dict(rounds=cfg["fl.rounds"], local_epochs=cfg["fl.local_epochs"], local_steps=cfg["fl.local_steps"],
              batch_size=cfg["fl.batch_size"], client_lr=cfg["fl.client_lr"], server_lr=cfg["fl.server_lr"],
              prox_mu=cfg["fl.prox_mu"], participation=cfg["fl.participation"], algorithm=cfg["fl.algorithm"],
              weighted=cfg["fl.weighted"], stc_strict=cfg["fl.stc_strict"], seed=seed)
    kw.update(overrides)
    return FedConfig(**kw)


def _arch(cfg, d, C, key="local.hidden"):
    return (d,) + tuple(cfg[key]) + (C,)


def _mlp_acc(params, ds: Dataset) -> float:
    return accuracy(np.argmax(mlp_forward(params, ds.features), axis=1), ds.labels)


# ---------------------------------------------------------------------------
# Protocols


def run_fens_seed(cfg, seed, train, val, test, threads=1) -> SeedResult:
    parts = build_parts(cfg, train, seed)
    fcfg = fens_config(cfg, seed)
    shards = make_shards(parts, fcfg.split_frac, seed)
    res = run_fens(shards, val, test, fcfg, threads)
    extra = {"round0_val_accuracy": res.round0_val_accuracy}
    artifacts = {"models": res.local_models, "global_model": res.global_model, "quantize": fcfg.quantize}
    if cfg["distill.enabled"]:
        aux = gen_synthetic(train.num_classes, train.dim, cfg["distill.aux_per_class"],
                            cfg["data.separation"], seed + 2_000_003) if cfg["data.source"] == "synthetic" else train
        recipe = DistillConfig(epochs=cfg["distill.epochs"], lr=cfg["distill.lr"],
                               batch_size=cfg["distill.batch_size"], temperature=cfg["distill.temperature"],
                               seed=seed)
        student = distill(res.global_model, aux.features, _arch(cfg, train.dim, train.num_classes, "distill.hidden"),
                          recipe)
        extra["distilled_test_accuracy"] = _mlp_acc(student.params, test)
        artifacts["student"] = student
    return SeedResult(seed, res.test_accuracy, res.val_accuracy, res.ledger.mean_client_total(), res.metrics,
                      res.ledger, "fens_" + fcfg.aggregator, extra, artifacts)


def run_fl_seed(cfg, seed, train, val, test, threads=1) -> SeedResult:
    parts = build_parts(cfg, train, seed)
    init = init_mlp(_arch(cfg, train.dim, train.num_classes), stream(seed, "init"))
    fcfg = fl_config(cfg, seed)
    test_trace = []

    def evaluate(p):
        test_trace.append(_mlp_acc(p, test))
        return _mlp_acc(p, val)

    final, metrics, ledger = run_fl(init, parts, fcfg, evaluate=evaluate, threads=threads)
    best = max(range(len(metrics)), key=lambda i: (metrics[i]["val_accuracy"], -i))
    row = metrics[best]
    per_client = (row["cum_up_bytes"] + row["cum_down_bytes"]) / len(parts)
    extra = {"best_round": row["round"], "final_test_accuracy": test_trace[-1]}
    return SeedResult(seed, test_trace[best], row["val_accuracy"], per_client, metrics, ledger, fcfg.algorithm,
                      extra, {"final": final, "arch": _arch(cfg, train.dim, train.num_classes)})


def run_ofl_seed(cfg, seed, train, val, test, threads=1) -> SeedResult:
    """One-round FedAvg; local epochs picked on the validation split."""
    parts = build_parts(cfg, train, seed)
    arch = _arch(cfg, train.dim, train.num_classes)
    init = init_mlp(arch, stream(seed, "init"))
    best = None
    for epochs in cfg["ofl.epoch_grid"]:
        fcfg = fl_config(cfg, seed, rounds=1, local_epochs=epochs, local_steps=None, algorithm="fedavg",
                         participation=1.0, client_lr=cfg["local.lr"], batch_size=cfg["local.batch_size"])
        params, _, ledger = run_fl(init, parts, fcfg, threads=threads)
        val_acc = _mlp_acc(params, val)
        if best is None or val_acc > best[0]:
            best = (val_acc, epochs, params, ledger)
    val_acc, epochs, params, ledger = best
    metrics = [dict(round=1, val_accuracy=val_acc, cum_up_bytes=ledger.total_up(),
                    cum_down_bytes=ledger.total_down())]
    return SeedResult(seed, _mlp_acc(params, test), val_acc, ledger.mean_client_total(), metrics, ledger,
                      "fedavg_one_round", {"local_epochs": epochs}, {"final": params, "arch": arch})


def run_local_seed(cfg, seed, train, val, test, threads=1) -> SeedResult:
    """Each client alone on 100% of its data; reports the mean client accuracy."""
    parts = build_parts(cfg, train, seed)
    arch = _arch(cfg, train.dim, train.num_classes)
    init = init_mlp(arch, stream(seed, "init"))
    accs_val, accs_test = [], []
    for i, part in enumerate(parts):
        p = train_local(init, part, cfg["local.epochs"], cfg["local.lr"], cfg["local.batch_size"],
                        cfg["local.cosine"], stream(seed, "local-train", i))
        accs_val.append(_mlp_acc(p, val))
        accs_test.append(_mlp_acc(p, test))
    ledger = CommLedger(len(parts))
    metrics = [dict(round=0, val_accuracy=float(np.mean(accs_val)), cum_up_bytes=0, cum_down_bytes=0)]
    return SeedResult(seed, float(np.mean(accs_test)), float(np.mean(accs_val)), 0.0, metrics, ledger,
                      "local_only", {"client_test_accuracy": accs_test})


RUNNERS = {
    "fens": run_fens_seed,
    "fl": run_fl_seed,
    "ofl_one_round": run_ofl_seed,
    "local_only": run_local_seed,
}


def run_seed(cfg: ExperimentConfig, seed: int, threads: int = 1) -> SeedResult:
    train, val, test = build_data(cfg, seed)
    return RUNNERS[cfg["protocol"]](cfg, seed, train, val, test, threads)


# ---------------------------------------------------------------------------
# Output


def metrics_csv(cfg: ExperimentConfig, results: list[SeedResult]) -> str:
    buf = _io.StringIO()
    buf.write(METRICS_VERSION + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in results:
        for m in r.metrics:
            w.writerow([m["round"], r.algorithm, repr(cfg["partition.alpha"]), r.seed, repr(float(m["val_accuracy"])),
                        m["cum_up_bytes"], m["cum_down_bytes"]])
    return buf.getvalue()


def summarize(cfg: ExperimentConfig, results: list[SeedResult]) -> dict:
    accs = [r.test_accuracy for r in results]
    out = {
        "protocol": cfg["protocol"],
        "algorithm": results[0].algorithm,
        "alpha": cfg["partition.alpha"],
        "seeds": [r.seed for r in results],
        "test_accuracy": accs,
        "accuracy_mean": statistics.fmean(accs),
        "accuracy_std": statistics.stdev(accs) if len(accs) > 1 else 0.0,
        "val_accuracy": [r.val_accuracy for r in results],
        "bytes_per_client": statistics.fmean(r.bytes_per_client for r in results),
        "extra": {str(r.seed): r.extra for r in results},
    }
    return out


def _write_artifacts(seed_dir: Path, r: SeedResult) -> None:
    seed_dir.mkdir(parents=True, exist_ok=True)
    (seed_dir / "ledger.json").write_text(r.ledger.to_json(), encoding="utf-8")
    art = r.artifacts
    if "models" in art:
        for i, m in enumerate(art["models"]):
            modelio.save(seed_dir / f"client_{i}.fens", m.params, modelio.mlp_descriptor(m.arch))
        if art["quantize"]:
            q = {f"{i}/{k}": v for i, m in enumerate(art["models"]) for k, v in quantize_params(m.params).items()}
            desc = f"ensemble:{len(art['models'])};" + modelio.mlp_descriptor(art["models"][0].arch)
            modelio.save(seed_dir / "ensemble.fensq", q, desc)
        spec = art["global_model"].aggregator
        modelio.save(seed_dir / "aggregator.fens", aggregator_tensors(spec), f"aggregator:{spec.kind}")
    if "student" in art:
        modelio.save(seed_dir / "student.fens", art["student"].params, modelio.mlp_descriptor(art["student"].arch))
    if "final" in art:
        modelio.save(seed_dir / "global.fens", art["final"], modelio.mlp_descriptor(art["arch"]))


def aggregator_tensors(spec) -> dict:
    if spec.kind == "vote":
        out = {f"competency/{i}": np.asarray(P, dtype=np.float32) for i, P in enumerate(spec.competency)}
        out["prior"] = np.asarray(spec.prior, dtype=np.float32)
        return out
    return dict(spec.params)


def run(cfg: ExperimentConfig, out_dir, threads: int = 1, seeds=None) -> dict:
    """Run every seed, write all artifacts under ``out_dir``; returns the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(seeds if seeds is not None else cfg["seeds"])
    (out / "config.txt").write_text(serialize(cfg), encoding="utf-8")
    results = []
    for seed in seeds:
        log.info("protocol %s, seed %d", cfg["protocol"], seed)
        r = run_seed(cfg, seed, threads)
        log.info("seed %d: test accuracy %.4f", seed, r.test_accuracy)
        _write_artifacts(out / f"seed_{seed}", r)
        results.append(r)
    (out / "metrics.csv").write_text(metrics_csv(cfg, results), encoding="utf-8")
    summary = summarize(cfg, results)
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    ledgers = {str(r.seed): r.ledger.to_dict() for r in results}
    (out / "ledger.json").write_text(json.dumps(ledgers, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# ---------------------------------------------------------------------------
# Comparison


def compare(run_dirs) -> str:
    """CSV table over completed runs, sorted by bytes per client."""
    rows = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise FileNotFoundError(f"missing summary file: {path}")
        s = json.loads(path.read_text(encoding="utf-8"))
        rows.append((s["protocol"], s["algorithm"], s["alpha"], s["accuracy_mean"], s["accuracy_std"],
                     s["bytes_per_client"], str(d)))
    rows.sort(key=lambda r: (r[5], r[0], r[6]))
    cheapest = rows[0][5] if rows else 0
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protocol", "algorithm", "alpha", "accuracy_mean", "accuracy_std", "bytes_per_client",
                "ratio_vs_min", "run"])
    for p, a, alpha, mean, std, nbytes, name in rows:
        ratio = nbytes / cheapest if cheapest else (1.0 if nbytes == 0 else float("inf"))
        w.writerow([p, a, alpha, f"{mean:.4f}", f"{std:.4f}", f"{nbytes:.1f}", f"{ratio:.4f}", name])
    return buf.getvalue()
