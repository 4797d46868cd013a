import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from fenssim import config as cfgmod
from fenssim.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, load_global_model, main
from fenssim.config import SCHEMA, ConfigError
from fenssim.data import load_csv
from fenssim.experiment import build_data
from fenssim.fens import accuracy, global_predict

TINY = """
# small but complete
data.classes = 3
data.dim = 4
data.train_per_class = 40
data.test_per_class = 20
partition.clients = 3
partition.alpha = 0.5
local.hidden = 8
local.epochs = 2
fens.k = 6
agg.rounds = 3
fl.rounds = 2
ofl.epoch_grid = 1,2
seeds = 0,1
"""


def write_cfg(tmp_path, extra="", name="c.txt"):
    p = tmp_path / name
    p.write_text(TINY + extra)
    return str(p)


# -- config ------------------------------------------------------------------


def test_defaults_valid_and_roundtrip():
    cfg = cfgmod.validate({})
    assert cfg["protocol"] == "fens" and cfg["fens.k"] == 40
    assert cfgmod.parse(cfgmod.serialize(cfg)) == cfg


@pytest.mark.parametrize("text,key", [
    ("protocol = gossip\n", "protocol"),
    ("nope.key = 1\n", "nope.key"),
    ("fens.k = 3\nfens.k = 4\n", "fens.k"),
    ("partition.alpha = 0\n", "partition.alpha"),
    ("local.epochs = many\n", "local.epochs"),
    ("data.source = csv\n", "data.train_csv"),
])
def test_config_errors_name_field(text, key):
    with pytest.raises(ConfigError) as exc:
        cfgmod.parse(text)
    assert exc.value.key == key


settable = st.fixed_dictionaries({}, optional={
    "partition.alpha": st.floats(1e-3, 1e6),
    "partition.clients": st.integers(1, 100),
    "seeds": st.lists(st.integers(0, 2**31), min_size=1, max_size=4).map(tuple),
    "local.hidden": st.lists(st.integers(1, 256), max_size=3).map(tuple),
    "fens.aggregator": st.sampled_from(SCHEMA["fens.aggregator"][2]),
    "fens.quantize": st.booleans(),
    "agg.server_lr": st.floats(0, 10),
    "fl.local_steps": st.one_of(st.none(), st.integers(0, 100)),
    "data.separation": st.floats(0, 100),
})


@given(settable)
def test_canonical_form_is_fixed_point(values):
    first = cfgmod.parse(cfgmod.serialize(cfgmod.validate(values)))
    assert cfgmod.parse(cfgmod.serialize(first)) == first == cfgmod.validate(values)


# -- subcommands -------------------------------------------------------------


def test_gen_data_and_partition(tmp_path):
    cfg = write_cfg(tmp_path)
    assert main(["gen-data", "--config", cfg, "--out", str(tmp_path / "d"), "--quiet"]) == EXIT_OK
    train = load_csv(tmp_path / "d" / "train.csv")
    assert len(train) == 120 and train.num_classes == 3
    assert main(["partition", "--config", cfg, "--csv", str(tmp_path / "d" / "train.csv"),
                 "--out", str(tmp_path / "p"), "--quiet"]) == EXIT_OK
    counts = json.loads((tmp_path / "p" / "partition.json").read_text())
    assert sum(sum(v) for v in counts.values()) == 120


@pytest.mark.parametrize("protocol", ["fens", "fl", "ofl_one_round", "local_only"])
def test_run_every_protocol(tmp_path, protocol):
    cfg = write_cfg(tmp_path, f"protocol = {protocol}\n")
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out), "--quiet"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["test_accuracy"]) == 2
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "# fens-metrics v1"
    assert lines[1] == "round,algorithm,alpha,seed,val_accuracy,cum_up_bytes,cum_down_bytes"
    assert (out / "ledger.json").exists() and (out / "config.txt").exists()


def test_run_is_byte_identical_across_threads(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, "fens.aggregator = moe\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a"), "--threads", "1", "--quiet"]) == 0
    monkeypatch.setenv("FENS_THREADS", "8")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--quiet"]) == 0
    for name in ("metrics.csv", "ledger.json", "summary.json", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_and_compare(tmp_path, capsys):
    fens = write_cfg(tmp_path, "protocol = fens\n", "f.txt")
    ofl = write_cfg(tmp_path, "protocol = ofl_one_round\n", "o.txt")
    assert main(["run", "--config", fens, "--seed-override", "4", "--out", str(tmp_path / "f"), "--quiet"]) == 0
    assert (tmp_path / "f" / "seed_4").is_dir() and not (tmp_path / "f" / "seed_0").exists()
    assert main(["run", "--config", ofl, "--seed-override", "4", "--out", str(tmp_path / "o"), "--quiet"]) == 0
    capsys.readouterr()
    assert main(["compare", str(tmp_path / "f"), str(tmp_path / "o"), str(tmp_path / "o")]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert len(rows) == 4
    assert rows[1].startswith("ofl_one_round") and rows[3].startswith("fens")
    assert float(rows[1].split(",")[6]) == 1.0 and float(rows[3].split(",")[6]) > 1.0


def test_saved_global_model_reloads(tmp_path):
    cfg_path = write_cfg(tmp_path)
    out = tmp_path / "r"
    assert main(["run", "--config", cfg_path, "--out", str(out), "--quiet"]) == 0
    cfg = cfgmod.load(out / "config.txt")
    _, _, test = build_data(cfg, 0)
    gm = load_global_model(out / "seed_0")
    summary = json.loads((out / "summary.json").read_text())
    assert accuracy(global_predict(gm, test.features), test.labels) == summary["test_accuracy"][0]
    assert main(["distill", str(out), "--out", str(tmp_path / "s.fens"), "--quiet"]) == 0
    assert (tmp_path / "s.fens").read_bytes().startswith(b"FENS1")


def test_grad_check_command(capsys):
    assert main(["grad-check", "--instances", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "nn" in out and "moe" in out
    assert main(["grad-check", "--instances", "2", "--tol", "1e-30", "--quiet"]) == EXIT_RUNTIME


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("protocol = gossip\n")
    assert main(["run", "--config", str(bad), "--quiet"]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.txt"), "--quiet"]) == EXIT_RUNTIME
    assert main(["compare", str(tmp_path), str(tmp_path), "--quiet"]) == EXIT_RUNTIME
    assert main(["compare", str(tmp_path), "--quiet"]) == EXIT_CONFIG
    assert main(["run", "--threads", "0", "--quiet"]) == EXIT_CONFIG
