"""Command-line entry point: ``fenssim <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import experiment
from . import io as modelio
from .config import ConfigError
from .data import PartitionSpec, dirichlet_partition, gen_synthetic, load_csv, save_csv
from .fens import DistillConfig, GlobalModel, accuracy, distill
from .models import AggregatorSpec, LocalModel, local_forward
from .quantize import dequantize

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get("FENS_THREADS", "1"))


def _load_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.validate({})
    if args.seed_override is not None:
        cfg = cfg.replace(seeds=(args.seed_override,))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg["seeds"][0]
    train, val, test = experiment.build_data(cfg, seed)
    save_csv(train, out / "train.csv")
    save_csv(val, out / "val.csv")
    save_csv(test, out / "test.csv")
    if not args.quiet:
        print(f"wrote {len(train)} train / {len(val)} val / {len(test)} test rows to {out}")
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _load_config(args)
    seed = cfg["seeds"][0]
    train = load_csv(args.csv) if args.csv else experiment.build_data(cfg, seed)[0]
    parts = dirichlet_partition(train, PartitionSpec(cfg["partition.alpha"], cfg["partition.clients"], seed),
                                cfg["partition.min_size"])
    counts = {str(i): p.label_counts().tolist() for i, p in enumerate(parts)}
    text = json.dumps(counts, indent=1, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "partition.json").write_text(text, encoding="utf-8")
        for i, p in enumerate(parts):
            save_csv(p, out / f"client_{i}.csv")
    if not args.quiet:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load_config(args)
    out = args.out or "runs/latest"
    summary = experiment.run(cfg, out, threads=_threads(args))
    if not args.quiet:
        print(f"{summary['protocol']} ({summary['algorithm']}) alpha={summary['alpha']}: "
              f"accuracy {summary['accuracy_mean']:.4f} +- {summary['accuracy_std']:.4f}, "
              f"{summary['bytes_per_client']:.0f} bytes/client -> {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        raise ConfigError("runs", "compare needs at least two run directories")
    table = experiment.compare(args.runs)
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    if not args.quiet:
        sys.stdout.write(table)
    return EXIT_OK


def load_global_model(seed_dir: Path) -> GlobalModel:
    models = []
    i = 0
    while (seed_dir / f"client_{i}.fens").exists():
        desc, params, _ = modelio.load(seed_dir / f"client_{i}.fens")
        models.append(LocalModel(modelio.parse_mlp_descriptor(desc), params))
        i += 1
    if not models:
        raise FileNotFoundError(f"no client models in {seed_dir}")
    if (seed_dir / "ensemble.fensq").exists():
        _, q, _ = modelio.load(seed_dir / "ensemble.fensq")
        deq = dequantize(q)
        models = [LocalModel(m.arch, {k: deq[f"{j}/{k}"] for k in m.params}) for j, m in enumerate(models)]
    desc, tensors, _ = modelio.load(seed_dir / "aggregator.fens")
    kind = desc.split(":", 1)[1]
    if kind == "vote":
        comp = [tensors[f"competency/{j}"].astype(np.float64) for j in range(len(models))]
        spec = AggregatorSpec(kind, competency=comp, prior=tensors["prior"].astype(np.float64))
    else:
        spec = AggregatorSpec(kind, tensors, k=tensors["W1"].shape[1] if kind == "nn" else None)
    return GlobalModel(models, spec)


def cmd_distill(args) -> int:
    run_dir = Path(args.run)
    cfg = cfgmod.load(run_dir / "config.txt")
    seed = args.seed_override if args.seed_override is not None else cfg["seeds"][0]
    gm = load_global_model(run_dir / f"seed_{seed}")
    train, _, test = experiment.build_data(cfg, seed)
    if cfg["data.source"] == "synthetic":
        aux = gen_synthetic(train.num_classes, train.dim, cfg["distill.aux_per_class"], cfg["data.separation"],
                            seed + 2_000_003).features
    else:
        aux = train.features
    recipe = DistillConfig(epochs=cfg["distill.epochs"], lr=cfg["distill.lr"], batch_size=cfg["distill.batch_size"],
                           temperature=cfg["distill.temperature"], seed=seed)
    arch = (train.dim,) + tuple(cfg["distill.hidden"]) + (train.num_classes,)
    student = distill(gm, aux, arch, recipe)
    out = Path(args.out) if args.out else run_dir / f"seed_{seed}" / "student.fens"
    modelio.save(out, student.params, modelio.mlp_descriptor(arch))
    teacher_acc = accuracy(np.argmax(gm.logits(test.features), axis=1), test.labels)
    student_acc = accuracy(np.argmax(local_forward(student, test.features), axis=1), test.labels)
    if not args.quiet:
        print(f"teacher accuracy {teacher_acc:.4f}, student accuracy {student_acc:.4f} -> {out}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    from .gradcheck import check_all

    results = check_all(instances=args.instances, seed=args.seed_override or 0)
    worst = max(results.values())
    if not args.quiet:
        for name, err in results.items():
            print(f"{name:<12} max rel err {err:.2e}")
    return EXIT_OK if worst < args.tol else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH")
    common.add_argument("--seed-override", type=int, metavar="N")
    common.add_argument("--out", metavar="DIR")
    common.add_argument("--threads", type=int, metavar="N")
    common.add_argument("--quiet", action="store_true")

    p = argparse.ArgumentParser(prog="fenssim", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write synthetic train/val/test CSVs")
    sp = sub.add_parser("partition", parents=[common], help="Dirichlet-partition a dataset")
    sp.add_argument("--csv", metavar="PATH", help="partition this CSV instead of the configured data")
    sub.add_parser("run", parents=[common], help="run the configured protocol for every seed")
    sp = sub.add_parser("compare", parents=[common], help="tabulate completed runs")
    sp.add_argument("runs", nargs="+")
    sp = sub.add_parser("distill", parents=[common], help="distil a FENS run into one model")
    sp.add_argument("run", metavar="RUN_DIR")
    sp = sub.add_parser("grad-check", parents=[common], help="finite-difference check of every model")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--tol", type=float, default=1e-3)
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "partition": cmd_partition,
    "run": cmd_run,
    "compare": cmd_compare,
    "distill": cmd_distill,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("config error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
