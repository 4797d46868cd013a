"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, collected in the terminal summary
under "acceptance criteria".  The heavy shared setting (10-class blobs,
d=20, 500 samples per class, separation 3, M=10, alpha=0.05, three seeds)
is built once per module.
"""

import time

import numpy as np
import pytest

from fenssim import config as cfgmod
from fenssim import experiment
from fenssim.data import PartitionSpec, dirichlet_partition, gen_synthetic, make_shards
from fenssim.fedalgos import FedConfig, run_fl, stc_compress
from fenssim.fens import (
    DistillConfig,
    GlobalModel,
    accuracy,
    broadcast_ensemble,
    distill,
    fit_static,
    global_predict,
    ledger_closed_form,
    ledger_report,
    phase1,
    phase2,
    run_fens,
    train_local,
)
from fenssim.gradcheck import check_all
from fenssim.ledger import CommLedger
from fenssim.models import (
    COMPETENCY_EPS,
    agg_average,
    agg_vote,
    aggregate_predict,
    ensemble_forward,
    init_aggregator,
    init_mlp,
    local_forward,
    mlp_forward,
    mlp_param_count,
)
from fenssim.numerics import params_hash
from fenssim.quantize import dequantize, payload_bytes, quantize_params
from fenssim.rng import stream

SEEDS = (0, 1, 2)


def setting_config():
    # the defaults are exactly the shared heterogeneous setting
    cfg = cfgmod.validate({})
    assert (cfg["data.classes"], cfg["data.dim"], cfg["data.train_per_class"]) == (10, 20, 500)
    assert (cfg["data.separation"], cfg["partition.clients"], cfg["partition.alpha"]) == (3.0, 10, 0.05)
    return cfg


@pytest.fixture(scope="module")
def hetero():
    """Per seed: data, shards, local models, both ensembles and the trained
    aggregators needed by criteria 3, 6, 7 and 8."""
    cfg = setting_config()
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        train, val, test = experiment.build_data(cfg, seed)
        fcfg = experiment.fens_config(cfg, seed)
        shards = make_shards(experiment.build_parts(cfg, train, seed), fcfg.split_frac, seed)
        models, _ = phase1(shards, fcfg)
        ens_q, _, _ = broadcast_ensemble(models, True)
        ens_f, _, _ = broadcast_ensemble(models, False)
        nn_q, trace_q, _ = phase2(ens_q, shards, fcfg, val=val)
        nn_f, _, _ = phase2(ens_f, shards, fcfg, val=val)
        avg = fit_static(ens_q, shards, "average")
        ofl = experiment.run_ofl_seed(cfg, seed, train, val, test)
        out[seed] = dict(train=train, val=val, test=test, shards=shards, models=models, ens_q=ens_q,
                         gm_nn=GlobalModel(ens_q, nn_q), gm_nn_f=GlobalModel(ens_f, nn_f),
                         gm_avg=GlobalModel(ens_q, avg), ofl_acc=ofl.test_accuracy, trace=trace_q)
    out["seconds"] = time.perf_counter() - t0
    return out


def test_c1_gradient_fidelity(accept):
    t0 = time.perf_counter()
    errs = check_all(instances=20, seed=0)
    secs = time.perf_counter() - t0
    worst = max(errs.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f" ({secs:.1f}s)"
    assert accept("C1 gradient fidelity (max rel err < 1e-3, < 60 s)", worst < 1e-3 and secs < 60, detail)


def _brute_force(votes, comps, prior):
    C = len(prior)
    post = [prior[r] * np.prod([P[r, v] for P, v in zip(comps, votes)]) for r in range(C)]
    util = [sum((1.0 if c == r else 0.0) * post[r] for r in range(C)) for c in range(C)]
    best = max(util)
    return min(c for c in range(C) if util[c] == best)


def test_c2_voting_oracle(accept):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        M, C = int(rng.integers(1, 4)), int(rng.integers(2, 4))
        comps = []
        for _ in range(M):
            counts = rng.integers(0, 8, (C, C)).astype(float)
            P = (counts + COMPETENCY_EPS) / (counts.sum(1, keepdims=True) + C * COMPETENCY_EPS)
            comps.append(P / P.sum(1, keepdims=True))
        votes = rng.integers(0, C, M)
        prior = np.full(C, 1.0 / C)
        mismatches += agg_vote(votes, comps, prior) != _brute_force(votes, comps, prior)
    secs = time.perf_counter() - t0
    ok = mismatches == 0 and secs < 10
    assert accept("C2 voting oracle (1000 instances, exact, < 10 s)", ok,
                  f"{mismatches} mismatches ({secs:.2f}s)")


def test_c3_heterogeneity_benefit(hetero, accept):
    nn = [accuracy(global_predict(hetero[s]["gm_nn"], hetero[s]["test"].features), hetero[s]["test"].labels)
          for s in SEEDS]
    avg = [accuracy(global_predict(hetero[s]["gm_avg"], hetero[s]["test"].features), hetero[s]["test"].labels)
           for s in SEEDS]
    ofl = [hetero[s]["ofl_acc"] for s in SEEDS]
    d_avg, d_ofl = 100 * (np.mean(nn) - np.mean(avg)), 100 * (np.mean(nn) - np.mean(ofl))
    ok = d_avg >= 5 and d_ofl >= 10 and hetero["seconds"] < 600
    detail = (f"NN {np.mean(nn):.3f}, average {np.mean(avg):.3f} (+{d_avg:.1f} pts), "
              f"one-round FedAvg {np.mean(ofl):.3f} (+{d_ofl:.1f} pts), setup {hetero['seconds']:.0f}s")
    assert accept("C3 heterogeneity benefit (>= 5 pts over averaging, >= 10 over one-round FedAvg)", ok, detail)


def test_c4_fl_sanity(accept):
    t0 = time.perf_counter()
    cfg = setting_config()
    train, val, test = experiment.build_data(cfg, 0)
    M = 8
    parts = dirichlet_partition(train, PartitionSpec(1e6, M, 0), min_size=2)
    arch = (train.dim, 64, train.num_classes)
    init = init_mlp(arch, stream(0, "init"))
    central = train_local(init, train, 30, 0.05, 16, True, stream(0, "central"))
    central_acc = accuracy(np.argmax(mlp_forward(central, test.features), 1), test.labels)
    fcfg = FedConfig(rounds=50, local_epochs=2, batch_size=16, client_lr=0.05, algorithm="fedavg", seed=0)
    test_trace = []

    def evaluate(p):
        test_trace.append(accuracy(np.argmax(mlp_forward(p, test.features), 1), test.labels))
        return accuracy(np.argmax(mlp_forward(p, val.features), 1), val.labels)

    _, metrics, _ = run_fl(init, parts, fcfg, evaluate=evaluate)
    best = max(range(len(metrics)), key=lambda i: (metrics[i]["val_accuracy"], -i))
    fl_acc = test_trace[best]
    secs = time.perf_counter() - t0
    ok = fl_acc >= 0.95 * central_acc and secs < 300
    assert accept("C4 FedAvg near-IID >= 95% of central within 50 rounds", ok,
                  f"FedAvg {fl_acc:.3f} (round {metrics[best]['round']}) vs central {central_acc:.3f} "
                  f"= {fl_acc / central_acc:.3f} ({secs:.0f}s)")


def test_c5a_ledger_closed_form(accept):
    rng = np.random.default_rng(7)
    checked, failures = 0, 0
    for kind in ("average", "weighted_average", "vote", "linear", "per_class", "nn", "moe"):
        for quant in (True, False):
            seed = int(rng.integers(0, 1000))
            train = gen_synthetic(4, 6, 50, 2.5, seed)
            val = gen_synthetic(4, 6, 20, 2.5, seed + 1)
            M = int(rng.integers(2, 6))
            parts = dirichlet_partition(train, PartitionSpec(0.3, M, seed), min_size=2)
            shards = make_shards(parts, 0.9, seed)
            R = int(rng.integers(0, 6))
            agg = FedConfig(rounds=R, local_steps=1, local_epochs=None, batch_size=16, client_lr=0.1,
                            server_lr=0.01, algorithm="fedadam")
            cfg = experiment.FensConfig(hidden=(8,), local_epochs=1, aggregator=kind, k=10, quantize=quant,
                                        agg_fl=agg, seed=seed)
            res = run_fens(shards, val, val, cfg)
            up = payload_bytes(res.local_models[0].params)
            ship = [payload_bytes(quantize_params(m.params) if quant else m.params) for m in res.local_models]
            trainable = kind in ("linear", "per_class", "nn", "moe")
            a = payload_bytes(res.global_model.aggregator.params) if trainable else 0
            static = {"weighted_average": 4 * 4, "vote": M * 4 * 4 * 4}.get(kind, 0)
            expect = ledger_closed_form(up, ship, R if trainable else 0, a, static)
            for i in range(M):
                checked += 1
                failures += res.ledger.client_total(i) != expect
    assert accept("C5a ledger equals closed form exactly", failures == 0,
                  f"{checked} client totals over 14 configs, {failures} mismatches")


def test_c5b_fens_over_ofl_ratio(accept):
    """Reference shapes: M=20, NN aggregator k=40 over C=10, 500 rounds,
    INT8 broadcast.  The local model size is not pinned down, so the ratio
    is evaluated over a sweep of sizes."""
    t0 = time.perf_counter()
    M, C, k, R = 20, 10, 40, 500
    a = payload_bytes(init_aggregator("nn", M, C, stream(0, "agg"), k=k).params)
    assert a == 8400 * 4
    tensors = 20
    rows = []
    for n in (10_000, 100_000, 1_000_000, 10_000_000):
        up = 4 * n
        shipped = n + 4 * tensors
        led = CommLedger(M)
        for i in range(M):
            led.record(i, "phase0_down", up)
            led.record(i, "phase1_up", up)
            led.record(i, "phase1_down", M * shipped)
            led.record(i, "phase2_up", R * a)
            led.record(i, "phase2_down", R * a)
        rep = ledger_report(led)
        # the report's FENS total includes the optional initial download
        fens = rep["fens_per_client"] - up
        assert fens == ledger_closed_form(up, [shipped] * M, R, a)
        rows.append((n, fens / up, fens / (2 * up)))
    secs = time.perf_counter() - t0
    ratios = [r[1] for r in rows]
    ok = all(3 <= r <= 6 for r in ratios) and secs < 1
    detail = "; ".join(f"n={n:.0e}: {r:.2f}x" for n, r, _ in rows)
    detail += " | counting the initial model download in both: " + ", ".join(f"{w:.2f}x" for *_, w in rows)
    accept("C5b FENS/OFL ratio in [3, 6] (OFL = one FP32 upload)", ok, detail)
    assert ok, detail


def test_c6_quantization(hetero, accept):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(100):
        arch = (int(rng.integers(2, 30)), int(rng.integers(1, 40)), int(rng.integers(2, 12)))
        p = init_mlp(arch, rng)
        q = quantize_params(p)
        back = dequantize(q)
        for name in p:
            err = float(np.max(np.abs(back[name].astype(np.float64) - p[name])))
            worst = max(worst, err / (q[name].scale / 2))
    bound_ok = worst <= 1 + 1e-6
    ratios = []
    for n in (1000, 4096, 100_000):
        x = {"t": rng.normal(size=n).astype(np.float32)}
        ratios.append(payload_bytes(x) / payload_bytes(quantize_params(x)))
    ratio_ok = all(3.9 <= r <= 4.0 for r in ratios)
    on = [accuracy(global_predict(hetero[s]["gm_nn"], hetero[s]["test"].features), hetero[s]["test"].labels)
          for s in SEEDS]
    off = [accuracy(global_predict(hetero[s]["gm_nn_f"], hetero[s]["test"].features), hetero[s]["test"].labels)
           for s in SEEDS]
    gap = 100 * abs(np.mean(on) - np.mean(off))
    worst_seed = 100 * max(abs(a - b) for a, b in zip(on, off))
    ok = bound_ok and ratio_ok and gap <= 2
    detail = (f"max err / (scale/2) = {worst:.4f}; payload ratios {', '.join(f'{r:.3f}' for r in ratios)}; "
              f"INT8 {np.mean(on):.3f} vs FP32 {np.mean(off):.3f} ({gap:.2f} pts, worst seed {worst_seed:.2f})")
    assert accept("C6 quantization (roundtrip, 4x payload, <= 2 pts end to end)", ok, detail)


def test_c7_reductions(hetero, accept):
    seed = 0
    shards = hetero[seed]["shards"]
    init = init_mlp((20, 64, 10), stream(seed, "init"))
    data = [s.local_train for s in shards]
    base = dict(rounds=3, local_epochs=1, batch_size=16, client_lr=0.05, seed=seed)
    a, _, la = run_fl(init, data, FedConfig(algorithm="fedavg", **base))
    b, _, lb = run_fl(init, data, FedConfig(algorithm="fedprox", prox_mu=0.0, **base))
    prox_ok = params_hash(a) == params_hash(b) and la.to_json() == lb.to_json()

    init_ok = True
    for s in SEEDS:
        ens, val = hetero[s]["ens_q"], hetero[s]["val"]
        Z = ensemble_forward(ens, val.features)
        ref = np.argmax(agg_average(Z), 1)
        for kind in ("nn", "per_class", "linear"):
            spec = init_aggregator(kind, len(ens), 10, stream(s, "aggregator-init"), d=20, k=40)
            init_ok &= bool(np.array_equal(aggregate_predict(spec, Z, val.features), ref))

    cd = stc_compress({"w": np.random.default_rng(1).normal(size=10_000).astype(np.float32)}, 0.5, 16)
    stc_ratio = 4 * 10_000 / cd.wire_bytes
    ok = prox_ok and init_ok and stc_ratio == 4.0
    assert accept("C7 reductions (FedProx mu=0, init = averaging, STC 4x)", ok,
                  f"FedProx(0)==FedAvg bit-exact: {prox_ok}; nn/per_class/linear init == average on all "
                  f"validation samples: {init_ok}; STC ratio {stc_ratio:.2f}")


def test_c8_distillation(hetero, accept):
    t0 = time.perf_counter()
    rows = []
    for s in SEEDS:
        h = hetero[s]
        aux = gen_synthetic(10, 20, 500, 3.0, s + 2_000_003).features
        assert aux.shape[0] == 5000
        student = distill(h["gm_nn"], aux, (20, 64, 10), DistillConfig(seed=s))
        teacher = accuracy(global_predict(h["gm_nn"], h["test"].features), h["test"].labels)
        acc = accuracy(np.argmax(local_forward(student, h["test"].features), 1), h["test"].labels)
        rows.append((teacher, acc))
    secs = time.perf_counter() - t0
    drops = [100 * (t - a) for t, a in rows]
    ok = all(d <= 5 for d in drops) and secs < 600
    assert payload_bytes(student.params) == 4 * mlp_param_count((20, 64, 10))
    assert accept("C8 distilled student within 5 pts of the ensemble (3 seeds)", ok,
                  "; ".join(f"seed {s}: {t:.3f} -> {a:.3f}" for s, (t, a) in zip(SEEDS, rows)) + f" ({secs:.0f}s)")


@pytest.mark.parametrize("protocol", ["fens", "fl"])
def test_c9_determinism(tmp_path, accept, protocol):
    cfg = setting_config().replace(protocol=protocol, seeds=(0, 1), agg__rounds=40, fl__rounds=5,
                                   local__epochs=5)
    outputs = {}
    for threads in (1, 8, 1):
        d = tmp_path / f"t{threads}_{len(outputs)}"
        experiment.run(cfg, d, threads=threads)
        outputs[len(outputs)] = ((d / "metrics.csv").read_bytes(), (d / "ledger.json").read_bytes())
    same = outputs[0] == outputs[1] == outputs[2]
    assert accept(f"C9 determinism ({protocol}, threads 1/8/1, metrics CSV + ledger JSON)", same,
                  "byte-identical" if same else "outputs differ")
