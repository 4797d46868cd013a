"""Experiment configuration: flat ``section.key = value`` text.

Blank lines and ``#`` comments are ignored.  Lists are comma separated.
``serialize`` writes every key in sorted order, so
``parse(serialize(parse(text))) == parse(text)``.
"""

from __future__ import annotations

from pathlib import Path

PROTOCOLS = ("fens", "fl", "ofl_one_round", "local_only")


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple:
    s = s.strip()
    return tuple(int(p) for p in s.split(",")) if s else ()


def _opt_int(s: str):
    return None if s.strip().lower() in ("", "none") else int(s)


# key -> (parser, default, check or choices)
SCHEMA = {
    "protocol": (str, "fens", PROTOCOLS),
    "seeds": (_ints, (0, 1, 2), lambda v: len(v) >= 1 and min(v) >= 0),
    "data.source": (str, "synthetic", ("synthetic", "csv")),
    "data.classes": (int, 10, lambda v: v >= 2),
    "data.dim": (int, 20, lambda v: v >= 2),
    "data.train_per_class": (int, 500, lambda v: v >= 1),
    "data.test_per_class": (int, 200, lambda v: v >= 1),
    "data.separation": (float, 3.0, lambda v: v >= 0),
    "data.train_csv": (str, "", None),
    "data.test_csv": (str, "", None),
    "partition.alpha": (float, 0.05, lambda v: v > 0),
    "partition.clients": (int, 10, lambda v: v >= 1),
    "partition.min_size": (int, 2, lambda v: v >= 1),
    "local.hidden": (_ints, (64,), lambda v: all(h >= 1 for h in v)),
    "local.epochs": (int, 30, lambda v: v >= 1),
    "local.lr": (float, 0.05, lambda v: v > 0),
    "local.batch_size": (int, 16, lambda v: v >= 1),
    "local.cosine": (_bool, True, None),
    "fens.aggregator": (str, "nn", ("average", "weighted_average", "vote", "linear", "per_class", "nn", "moe")),
    "fens.k": (int, 40, lambda v: v >= 1),
    "fens.gate_hidden": (int, 32, lambda v: v >= 1),
    "fens.quantize": (_bool, True, None),
    "fens.split_frac": (float, 0.9, lambda v: 0 < v < 1),
    "fens.cache_logits": (_bool, False, None),
    "fens.count_init_download": (_bool, False, None),
    "agg.algorithm": (str, "fedadam", ("fedavg", "fedprox", "fedadam", "fedyogi", "fedavg_stc")),
    "agg.rounds": (int, 200, lambda v: v >= 0),
    "agg.local_steps": (int, 1, lambda v: v >= 0),
    "agg.batch_size": (int, 128, lambda v: v >= 1),
    "agg.client_lr": (float, 0.1, lambda v: v > 0),
    "agg.server_lr": (float, 0.01, lambda v: v >= 0),
    "fl.algorithm": (str, "fedavg", ("fedavg", "fedprox", "fedadam", "fedyogi", "fedavg_stc")),
    "fl.rounds": (int, 50, lambda v: v >= 1),
    "fl.local_epochs": (int, 2, lambda v: v >= 0),
    "fl.local_steps": (_opt_int, None, lambda v: v is None or v >= 0),
    "fl.batch_size": (int, 16, lambda v: v >= 1),
    "fl.client_lr": (float, 0.05, lambda v: v > 0),
    "fl.server_lr": (float, 1.0, lambda v: v >= 0),
    "fl.prox_mu": (float, 0.0, lambda v: v >= 0),
    "fl.participation": (float, 1.0, lambda v: 0 < v <= 1),
    "fl.weighted": (_bool, False, None),
    "fl.stc_strict": (_bool, False, None),
    "ofl.epoch_grid": (_ints, (1, 2, 5, 10, 15, 20), lambda v: len(v) >= 1 and min(v) >= 1),
    "distill.enabled": (_bool, False, None),
    "distill.aux_per_class": (int, 500, lambda v: v >= 1),
    "distill.hidden": (_ints, (64,), lambda v: all(h >= 1 for h in v)),
    "distill.epochs": (int, 30, lambda v: v >= 1),
    "distill.lr": (float, 0.05, lambda v: v > 0),
    "distill.batch_size": (int, 64, lambda v: v >= 1),
    "distill.temperature": (float, 1.0, lambda v: v > 0),
}


class ExperimentConfig(dict):
    """A validated mapping holding every schema key."""

    def replace(self, **changes) -> "ExperimentConfig":
        new = dict(self)
        for k, v in changes.items():
            new[k.replace("__", ".")] = v
        return validate(new)


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def validate(values: dict) -> ExperimentConfig:
    out = {}
    for key, (_, default, check) in SCHEMA.items():
        v = values.get(key, default)
        if isinstance(check, tuple):
            if v not in check:
                raise ConfigError(key, f"{v!r} is not one of {', '.join(check)}")
        elif check is not None and not check(v):
            raise ConfigError(key, f"invalid value {_format(v)!r}")
        out[key] = v
    unknown = set(values) - set(SCHEMA)
    if unknown:
        key = sorted(unknown)[0]
        raise ConfigError(key, "unknown key")
    if out["data.source"] == "csv" and not (out["data.train_csv"] and out["data.test_csv"]):
        raise ConfigError("data.train_csv", "csv source needs data.train_csv and data.test_csv")
    return ExperimentConfig(out)


def parse(text: str) -> ExperimentConfig:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "given twice")
        try:
            raw[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {value!r} ({exc})") from None
    return validate(raw)


def serialize(cfg: dict) -> str:
    return "".join(f"{k} = {_format(cfg[k])}\n" for k in sorted(cfg))


def load(path) -> ExperimentConfig:
    return parse(Path(path).read_text(encoding="utf-8"))
