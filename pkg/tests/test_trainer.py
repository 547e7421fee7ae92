import json
import math

import numpy as np
import pytest

from oracles import fixmatch_loss
from semiforge import semi
from semiforge.datagen import ClassProfile, synth_dataset
from semiforge.semi import ConfigError, DivergenceError
from semiforge.trainer import (
    ABLATION_FLAGS,
    EpochMetrics,
    TrainConfig,
    Trainer,
    baseline_config,
    evaluate,
    mask_probability,
    metrics_from_json,
    run_experiment,
)


@pytest.fixture(scope="module")
def ds():
    return synth_dataset(ClassProfile(4, 60, 300, 10, 0.1), d=6, class_sep=3.0,
                         test_per_class=25, seed=5)


def tiny(**kw):
    base = dict(epochs_total=4, steps_per_epoch=10, batch_labeled=8, batch_unlabeled=16,
                warmup_epochs=1, hidden=12, h=6)
    base.update(kw)
    return TrainConfig(**base)


def fixed_views(trainer, seed):
    rng = np.random.default_rng(seed)
    ds = trainer.ds
    il = rng.integers(0, len(ds.y_labeled), 8)
    iu = rng.integers(0, len(ds.y_hidden), 16)
    xw = ds.x_unlabeled[iu] + 0.05 * rng.normal(size=(16, ds.d))
    xs = ds.x_unlabeled[iu] + 0.5 * rng.normal(size=(16, ds.d))
    return ds.x_labeled[il], ds.y_labeled[il], xw, xs


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny(warmup_epochs=4).validate()
    with pytest.raises(ConfigError):
        tiny(batch_labeled=0).validate()
    with pytest.raises(ConfigError):
        tiny(sigma_weak=0.5, sigma_strong=0.1).validate()
    cfg = tiny()
    cfg.semi.tau = 1.5
    with pytest.raises(ConfigError):
        cfg.validate()


def test_warmup_step_is_fixmatch_with_unit_weights(ds):
    tr = Trainer(tiny(), ds)
    assert tr.in_warmup
    xl, yl, xw, xs = fixed_views(tr, 0)
    res, _ = tr.compute_step(xl, yl, xw, xs)
    assert res.losses["loss_ea"] == res.losses["loss_bs"] == res.losses["loss_bu"] == 0
    assert np.all(res.records.weight == 1)
    np.testing.assert_array_equal(res.records.q_prime, res.records.q)
    assert np.all(res.grads.W_bal == 0) and np.all(res.grads.b_bal == 0)
    p = tr.params
    ref = fixmatch_loss(p.W1, p.b1, p.W2, p.b2, p.W_std, p.b_std, xl, yl, xw, xs, tau=0.95)
    assert res.total == pytest.approx(ref, abs=1e-12)


def test_main_phase_uses_every_term(ds):
    tr = Trainer(tiny(), ds)
    for _ in range(10):
        tr.train_step(*tr.sample_batches()[:3])
    tr.epoch = 2
    res = tr.train_step(*tr.sample_batches()[:3])
    assert res.losses["loss_bs"] > 0 and res.losses["loss_ea"] > 0
    assert np.any(res.grads.W_bal != 0)
    assert np.all((res.records.weight >= 0.5) & (res.records.weight <= 1))


def test_baseline_steps_match_reference_along_trajectory(ds):
    tr = Trainer(baseline_config(**{k: v for k, v in tiny().to_dict().items()
                                    if k in ("hidden", "h", "epochs_total", "warmup_epochs")}), ds)
    tr.epoch = 3
    for i in range(20):
        views = fixed_views(tr, i)
        p = tr.params
        ref = fixmatch_loss(p.W1, p.b1, p.W2, p.b2, p.W_std, p.b_std, *views, tau=0.95)
        assert tr.step_on_views(*views).total == pytest.approx(ref, abs=1e-12)


@pytest.mark.parametrize(
    "flag,allowed",
    [("use_ea", {"loss_ea"}), ("use_balanced", {"loss_bs", "loss_bu"}),
     ("use_oheml", {"loss_u"}), ("use_plce", {"loss_u", "loss_bu"})],
)
def test_ablation_flags_only_touch_their_terms(ds, flag, allowed):
    full = Trainer(tiny(), ds)
    for _ in range(150):
        full.train_step(*full.sample_batches()[:3])
    assert full.bank.count.sum() > 0
    full.epoch = 3
    ablated = Trainer(tiny(**{flag: False}), ds)
    # share the state so only the flag differs
    ablated.params, ablated.bank, ablated.tracker, ablated.epoch = (
        full.params, full.bank, full.tracker, full.epoch)
    views = fixed_views(full, 99)
    a, _ = full.compute_step(*views)
    b, _ = ablated.compute_step(*views)
    changed = {n for n in semi.LOSS_NAMES if a.losses[n] != b.losses[n]}
    assert changed and changed <= allowed
    if flag == "use_ea":
        assert b.losses["loss_ea"] == 0
    if flag == "use_balanced":
        assert np.all(b.grads.W_bal == 0) and np.all(b.grads.b_bal == 0)


def test_seeded_loss_trajectory_is_deterministic(ds):
    def trajectory():
        tr = Trainer(tiny(seed=3), ds)
        out = []
        for i in range(50):
            tr.epoch = 0 if i < 25 else 2
            out.append(tr.train_step(*tr.sample_batches()[:3]).total)
        return out

    assert trajectory() == trajectory()


def test_memory_bank_filled_during_warmup(ds):
    tr = Trainer(tiny(), ds)
    for _ in range(150):
        tr.train_step(*tr.sample_batches()[:3])
    assert tr.in_warmup and tr.bank.count.sum() > 0
    assert tr.bank.steps == 150


def test_divergence_is_reported(ds):
    tr = Trainer(tiny(), ds)
    tr.params = tr.params.map(lambda a: a * 1e6)
    xl, yl, xw, xs = fixed_views(tr, 1)
    with pytest.raises(DivergenceError):
        tr.step_on_views(xl, yl * 0 + 3, xw, xs)


def test_sampler_covers_labeled_set(ds):
    tr = Trainer(tiny(), ds)
    n, b = len(ds.y_labeled), 8
    window = 2 * math.ceil(n / b)
    counts = np.zeros(n)
    windows = 200
    for _ in range(windows * window):
        il = tr.rng.integers(0, n, b)
        np.add.at(counts, il, 1)
    per_window = counts / windows
    assert per_window.mean() == pytest.approx(window * b / n)
    assert per_window.min() >= 1


def test_evaluate_constant_predictor(ds):
    tr = Trainer(tiny(), ds)
    p = tr.params.copy()
    p.W_std[:] = 0
    p.b_std[:] = [5, 0, 0, 0]
    ev = evaluate(p, ds.x_test, ds.y_test)
    assert ev["acc_std"] == pytest.approx(1 / 4)
    np.testing.assert_array_equal(ev["per_class_std"], [1, 0, 0, 0])
    assert ev["confusion_std"].sum(axis=1).tolist() == [25] * 4
    with pytest.raises(semi.InvalidInputError):
        evaluate(p, ds.x_test[:0], ds.y_test[:0])


def test_evaluate_separable_data():
    easy = synth_dataset(ClassProfile(2, 50, 50, 1, 1), d=4, class_sep=10, test_per_class=100, seed=1)
    res = run_experiment(tiny(epochs_total=3, warmup_epochs=1), easy)
    ev = evaluate(res.final_params, easy.x_test, easy.y_test)
    assert ev["acc_std"] > 0.95
    assert np.mean(ev["per_class_bal"]) == pytest.approx(ev["acc_bal"], abs=1e-12)
    assert np.mean(ev["per_class_std"]) == pytest.approx(ev["acc_std"], abs=1e-12)


def test_run_experiment_zero_epochs(ds):
    res = run_experiment(tiny(epochs_total=0, warmup_epochs=0), ds)
    assert res.history == [] and res.best is None
    assert res.final_params.equals(res.initial_params)


def test_run_experiment_reproducible_and_well_formed(ds):
    a = run_experiment(tiny(seed=2), ds)
    b = run_experiment(tiny(seed=2), ds)
    assert [m.to_json() for m in a.history] == [m.to_json() for m in b.history]
    assert a.final_params.equals(b.final_params)
    for m in a.history:
        assert 0 <= m.mask_prob <= 1 and 0 <= m.used_acc <= 1
        assert len(m.acc_per_class) == 4
        assert np.sum(m.confusion) == 100
        assert metrics_from_json(m.to_json()) == m
    assert a.best.acc_bal == max(m.acc_bal for m in a.history)


def test_mask_prob_metric_is_mean_of_mask_bits(ds, monkeypatch):
    bits = []
    original = Trainer.train_step

    def spy(self, xl, yl, xu):
        res = original(self, xl, yl, xu)
        bits.append(res.records.mask_std.copy())
        return res

    monkeypatch.setattr(Trainer, "train_step", spy)
    cfg = tiny(epochs_total=2)
    res = run_experiment(cfg, ds)
    for e, m in enumerate(res.history):
        epoch_bits = np.concatenate(bits[e * cfg.steps_per_epoch:(e + 1) * cfg.steps_per_epoch])
        assert m.mask_prob == pytest.approx(epoch_bits.mean(), abs=1e-15)


def test_mask_probability_monotone_in_threshold(ds):
    tr = Trainer(tiny(), ds)
    aug = tr.cfg.augment()
    lo = mask_probability(tr.params, ds.x_unlabeled, 0.5, aug, seed=0)
    hi = mask_probability(tr.params, ds.x_unlabeled, 0.9, aug, seed=0)
    assert lo >= hi
    assert lo == mask_probability(tr.params, ds.x_unlabeled, 0.5, aug, seed=0)


def test_baseline_config_disables_everything():
    cfg = baseline_config()
    assert not any(getattr(cfg, f) for f in ABLATION_FLAGS)
    assert cfg.semi.tau == 0.95 and cfg.headline == "std"


def test_metrics_json_field_names(ds):
    m = run_experiment(tiny(epochs_total=2), ds).history[0]
    keys = set(json.loads(m.to_json()))
    required = {"epoch", "acc_std", "acc_bal", "acc_per_class", "mask_prob", "used_acc",
                "mean_weight", "gamma_u_est", "loss_s", "loss_u", "loss_ea", "loss_bs", "loss_bu"}
    assert required <= keys
    with pytest.raises(ValueError):
        metrics_from_json('{"epoch": 0}')
    assert isinstance(m, EpochMetrics)


def test_hidden_labels_do_not_affect_training(ds):
    shuffled = synth_dataset(ClassProfile(4, 60, 300, 10, 0.1), d=6, class_sep=3.0,
                             test_per_class=25, seed=5)
    shuffled.y_hidden = np.zeros_like(shuffled.y_hidden)
    a = run_experiment(tiny(epochs_total=2), ds)
    b = run_experiment(tiny(epochs_total=2), shuffled)
    assert a.final_params.equals(b.final_params)
    assert [m.acc_bal for m in a.history] == [m.acc_bal for m in b.history]
