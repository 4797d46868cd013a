import numpy as np
import pytest

from fenssim.data import PartitionSpec, dirichlet_partition, gen_synthetic, make_shards, split_eval
from fenssim.fedalgos import FedConfig
from fenssim.fens import (
    DistillConfig,
    AggregatorTask,
    FensConfig,
    GlobalModel,
    accuracy,
    broadcast_ensemble,
    distill,
    distill_loss,
    ensemble_fingerprint,
    fit_static,
    global_predict,
    kd_loss_and_grad,
    ledger_closed_form,
    ledger_report,
    phase1,
    phase2,
    run_fens,
)
from fenssim.ledger import CommLedger
from fenssim.models import AggregatorSpec, LocalModel, agg_average, ensemble_forward, init_mlp, local_forward
from fenssim.numerics import cast_params, grad_check, params_hash
from fenssim.quantize import payload_bytes, quantize_params


def setup(seed=0, M=4, alpha=0.3):
    train = gen_synthetic(4, 6, 60, 3.0, seed)
    val, test = split_eval(gen_synthetic(4, 6, 40, 3.0, seed + 100), seed)
    parts = dirichlet_partition(train, PartitionSpec(alpha, M, seed), min_size=2)
    return make_shards(parts, 0.9, seed), val, test


def small_cfg(**kw):
    agg = FedConfig(rounds=kw.pop("rounds", 20), local_steps=1, local_epochs=None, batch_size=32,
                    client_lr=0.1, server_lr=0.01, algorithm="fedadam")
    base = dict(hidden=(16,), local_epochs=5, local_lr=0.05, k=12, agg_fl=agg)
    base.update(kw)
    return FensConfig(**base)


def test_phase1_upload_and_determinism():
    shards, _, _ = setup()
    cfg = small_cfg()
    models, ledger = phase1(shards, cfg)
    again, _ = phase1(shards, cfg, threads=3)
    assert ensemble_fingerprint(models) == ensemble_fingerprint(again)
    for i, m in enumerate(models):
        assert ledger.get(i, "phase1_up") == payload_bytes(m.params)
    assert "phase0_down" not in ledger.phases()
    _, with_init = phase1(shards, small_cfg(count_init_download=True))
    assert with_init.get(0, "phase0_down") == payload_bytes(models[0].params)


def test_single_class_client_predicts_its_class():
    train = gen_synthetic(3, 4, 50, 3.0, 0)
    only = train.subset(np.flatnonzero(train.labels == 2))
    shard = make_shards([only], 0.9, 0)[0]
    models, _ = phase1([shard], small_cfg())
    val = gen_synthetic(3, 4, 100, 3.0, 1)
    pred = np.argmax(ensemble_forward(models, val.features)[:, 0], 1)
    assert np.mean(pred == 2) >= 0.99


def test_broadcast_bytes(rng):
    models = [LocalModel((99, 10), init_mlp((99, 10), rng)) for _ in range(4)]
    _, off, _ = broadcast_ensemble(models, False)
    _, on, _ = broadcast_ensemble(models, True)
    assert all(off.get(i, "phase1_down") == 16000 for i in range(4))
    assert all(on.get(i, "phase1_down") == 4 * (1000 + 2 * 4) for i in range(4))
    assert 16000 / (4 * 1008) == pytest.approx(3.97, abs=0.01)


def test_phase2_zero_rounds_is_averaging():
    shards, val, _ = setup()
    cfg = small_cfg(rounds=0)
    models, _ = phase1(shards, cfg)
    ens, _, _ = broadcast_ensemble(models, True)
    for kind in ("nn", "linear", "per_class", "moe"):
        spec, metrics, _ = phase2(ens, shards, small_cfg(rounds=0, aggregator=kind), val=val)
        Z = ensemble_forward(ens, val.features)
        np.testing.assert_array_equal(global_predict(GlobalModel(ens, spec), val.features),
                                      np.argmax(agg_average(Z), 1))
        assert metrics[0]["val_accuracy"] == accuracy(np.argmax(agg_average(Z), 1), val.labels)


def test_phase2_freezes_ensemble_and_cache_is_transparent():
    shards, val, _ = setup()
    models, _ = phase1(shards, small_cfg())
    ens, _, _ = broadcast_ensemble(models, True)
    before = ensemble_fingerprint(ens)
    a, ma, la = phase2(ens, shards, small_cfg(), val=val)
    b, mb, lb = phase2(ens, shards, small_cfg(cache_logits=True), val=val, threads=4)
    assert ensemble_fingerprint(ens) == before
    assert all(params_hash({k: a.params[k]}) == params_hash({k: b.params[k]}) for k in a.params)
    assert ma == mb and la.to_json() == lb.to_json()
    with pytest.raises(ValueError):
        phase2(ens, shards, small_cfg(aggregator="vote"))


def test_aggregator_task_gradient():
    shards, _, _ = setup()
    models, _ = phase1(shards, small_cfg(local_epochs=1))
    models64 = [LocalModel(m.arch, cast_params(m.params, np.float64)) for m in models]
    task = AggregatorTask(models64, "per_class")
    lam = np.random.default_rng(0).normal(size=(4, 4))
    batch = (shards[0].agg_train.features, shards[0].agg_train.labels)
    assert grad_check(task, {"lambda": lam}, batch) < 1e-4


def test_fit_static_payloads():
    shards, _, _ = setup()
    models, _ = phase1(shards, small_cfg(local_epochs=1))
    led = CommLedger(4)
    assert fit_static(models, shards, "average", led).params == {}
    assert led.total() == 0
    spec = fit_static(models, shards, "weighted_average", led)
    np.testing.assert_allclose(spec.params["lambda"].sum(axis=0), 1, atol=1e-6)
    assert all(led.get(i, "static_up") == 4 * 4 for i in range(4))
    led2 = CommLedger(4)
    vote = fit_static(models, shards, "vote", led2)
    assert len(vote.competency) == 4
    assert all(led2.get(i, "static_up") == 4 * 4 * 4 * 4 for i in range(4))


def test_global_predict_identical_logits():
    W = np.zeros((2, 2), np.float32)
    m = LocalModel((2, 2), {"W0": W, "b0": np.array([3.0, 1.0], np.float32)})
    gm = GlobalModel([m, m, m], AggregatorSpec("average"))
    assert global_predict(gm, np.zeros(2, np.float32)) == 0


@pytest.mark.parametrize("kind,quant", [("nn", True), ("vote", False), ("weighted_average", True), ("moe", False)])
def test_ledger_closed_form_end_to_end(kind, quant):
    shards, val, test = setup(seed=1)
    cfg = small_cfg(aggregator=kind, quantize=quant, rounds=5)
    res = run_fens(shards, val, test, cfg)
    M = len(shards)
    up = payload_bytes(res.local_models[0].params)
    if quant:
        ship = [payload_bytes(quantize_params(m.params)) for m in res.local_models]
    else:
        ship = [up] * M
    rounds = 5 if kind in ("nn", "moe") else 0
    a = payload_bytes(res.global_model.aggregator.params) if rounds else 0
    static = {"vote": M * 4 * 4 * 4, "weighted_average": 4 * 4}.get(kind, 0)
    for i in range(M):
        assert res.ledger.client_total(i) == ledger_closed_form(up, ship, rounds, a, static)


def test_training_does_not_collapse():
    for seed in range(3):
        shards, val, test = setup(seed=seed, alpha=0.1)
        res = run_fens(shards, val, test, small_cfg(rounds=30, seed=seed))
        assert res.metrics[-1]["val_accuracy"] >= res.round0_val_accuracy - 0.005


def test_ledger_formula_examples():
    assert ledger_closed_form(100, [25] * 4, 2, 10) == 240
    led = CommLedger(4)
    for i in range(4):
        led.record(i, "phase1_up", 100)
        led.record(i, "phase1_down", 4 * 25)
        led.record(i, "phase2_up", 2 * 10)
        led.record(i, "phase2_down", 2 * 10)
    assert ledger_report(led)["fens_over_ofl"] == pytest.approx(2.4)
    # no rounds, quantisation off: upload plus M full models
    assert ledger_closed_form(100, [100] * 4, 0, 10) / 100 == 1 + 4
    assert ledger_closed_form(100, [25] * 4, 6, 10) - ledger_closed_form(100, [25] * 4, 3, 10) == 2 * 10 * 3


def test_kd_loss_gradient_and_zero_at_match(rng):
    t = rng.normal(size=(5, 3))
    for T in (1.0, 2.5):
        loss, _ = kd_loss_and_grad(t, t, T)
        assert abs(loss) < 1e-12

        def fn(p, _):
            l, g = kd_loss_and_grad(p["s"], t, T)
            return l, {"s": g}

        assert grad_check(fn, {"s": rng.normal(size=(5, 3))}) < 1e-5


def test_distill_from_self_is_free():
    shards, val, _ = setup()
    models, _ = phase1(shards[:1], small_cfg())
    gm = GlobalModel(models, AggregatorSpec("average"))
    student = LocalModel(models[0].arch, models[0].params)
    assert distill_loss(gm, student, val.features) < 1e-10
    out = distill(gm, val.features, models[0].arch, DistillConfig(epochs=1), init=models[0].params)
    assert payload_bytes(out.params) == payload_bytes(models[0].params)
    with pytest.raises(ValueError):
        distill(GlobalModel(models, AggregatorSpec("vote", competency=[np.eye(4)])), val.features, (6, 4))
    with pytest.raises(ValueError):
        distill(gm, val.features[:0], (6, 4))


def test_distilled_student_is_small_and_accurate():
    shards, val, test = setup(seed=2, alpha=1.0)
    res = run_fens(shards, val, test, small_cfg(aggregator="average"))
    aux = gen_synthetic(4, 6, 300, 3.0, 77).features
    student = distill(res.global_model, aux, (6, 16, 4), DistillConfig(epochs=10))
    acc = accuracy(np.argmax(local_forward(student, test.features), 1), test.labels)
    assert acc >= res.test_accuracy - 0.1
    assert payload_bytes(student.params) * 4 == sum(payload_bytes(m.params) for m in res.local_models)
