import numpy as np
import pytest

from advgdro import dro
from advgdro import model as M
from advgdro.attack import AttackConfig
from advgdro.data import GroupedDataset, SpuriousSpec, generate, sample_batch
from advgdro.errors import ConfigError
from advgdro.evaluation import evaluate
from advgdro.trainers import (SGD, TrainConfig, adv_erm_step, adv_gdro_step, draw_group, erm_step, gdro_step,
                              train)

ATTACK = AttackConfig(epsilon=0.1, eta_delta=0.05, steps=3, sigma=0.01)


def same_records(a, b, groups=True):
    assert a.final_params.equals(b.final_params)
    np.testing.assert_array_equal(a.step_loss, b.step_loss)
    np.testing.assert_array_equal(a.step_q, b.step_q)
    if groups:
        # ERM-style runs log g = -1; group runs log the drawn group
        np.testing.assert_array_equal(a.step_group, b.step_group)


@pytest.mark.parametrize("kwargs", [
    dict(method="erm", eta_q=0.01),
    dict(method="gdro"),
    dict(method="adv_erm"),
    dict(method="erm", attack=ATTACK),
    dict(method="erm", sampling="by_class"),
    dict(method="erm", momentum=1.0),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        TrainConfig(**kwargs).validate()


def test_zero_steps_returns_initial_model(toy):
    rec = train(TrainConfig("erm", total_steps=0), toy, toy)
    assert rec.final_params.equals(rec.initial_params)
    assert rec.best_step == 0 and rec.steps_done == 0
    assert [s for s, _ in rec.evals] == [0]


def test_zero_rate_leaves_params(toy):
    rec = train(TrainConfig("adv_gdro", eta_theta=0.0, total_steps=20, batch_size=8, attack=ATTACK, eta_q=0.1),
                toy)
    assert rec.final_params.equals(rec.initial_params)


def test_sgd_step_on_quadratic():
    # f(w) = (w - 3)^2 at w = 1: gradient -4, step 0.1 * 0.5 -> w = 1.2
    p = M.ModelParams([np.array([[1.0]])], [np.zeros(1)])
    g = M.ModelParams([np.array([[2 * (1.0 - 3.0)]])], [np.zeros(1)])
    assert SGD(0.1).step(p, g, 0.5).weights[0][0, 0] == pytest.approx(1.2, abs=1e-15)


def test_small_step_decreases_batch_loss(toy, rng):
    params = M.init_params([toy.d, 2], rng=rng)
    batch = sample_batch(toy, rng, 32)
    cfg = TrainConfig("erm", eta_theta=1e-3)
    new, lv = erm_step(params, batch, cfg)
    assert M.loss(new, batch.x, batch.y) <= lv.value


def test_average_iterate_is_mean_of_snapshots(toy):
    rec = train(TrainConfig("gdro", total_steps=40, batch_size=8, eta_q=0.1, keep_iterates=True), toy)
    mean = np.mean([p.flat() for p in rec.iterates], axis=0)
    np.testing.assert_allclose(rec.avg_params.flat(), mean, atol=1e-10)


@pytest.mark.parametrize("method", ["erm", "adv_erm", "gdro", "adv_gdro"])
def test_runs_are_deterministic(toy, method):
    kw = dict(total_steps=30, batch_size=8, eval_every=10)
    if method in ("adv_erm", "adv_gdro"):
        kw["attack"] = ATTACK
    if method in ("gdro", "adv_gdro"):
        kw["eta_q"] = 0.05
    a = train(TrainConfig(method, **kw), toy, toy)
    b = train(TrainConfig(method, **kw), toy, toy)
    same_records(a, b)
    assert a.best_params.equals(b.best_params) and a.best_step == b.best_step


def test_zero_epsilon_adversarial_erm_equals_erm(toy):
    kw = dict(total_steps=50, batch_size=8)
    a = train(TrainConfig("adv_erm", attack=AttackConfig(epsilon=0.0, sigma=0.3), **kw), toy)
    b = train(TrainConfig("erm", **kw), toy)
    same_records(a, b)


def test_no_steps_no_noise_adversarial_erm_equals_erm(toy):
    kw = dict(total_steps=50, batch_size=8)
    a = train(TrainConfig("adv_erm", attack=AttackConfig(epsilon=0.3, steps=0, sigma=0.0), **kw), toy)
    b = train(TrainConfig("erm", **kw), toy)
    same_records(a, b)


def test_single_group_dro_is_erm(toy):
    one = toy.regroup(np.zeros(len(toy), dtype=int), 1)
    a = train(TrainConfig("gdro", eta_q=0.3, total_steps=50, batch_size=8), one)
    b = train(TrainConfig("erm", total_steps=50, batch_size=8), one)
    same_records(a, b, groups=False)


def test_frozen_uniform_weights_rescale_the_rate(toy):
    cfg = TrainConfig("adv_gdro", eta_theta=0.1, batch_size=8, attack=ATTACK, eta_q=0.0)
    plain = TrainConfig("adv_erm", eta_theta=0.1 / 4, batch_size=8, attack=ATTACK)
    p = q = M.init_params([toy.d, 8, 2], rng=np.random.default_rng(0))
    weights = dro.init_uniform(4, 0.0)
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(50):
        p, weights, g, _ = adv_gdro_step(p, weights, toy, cfg, r1)
        batch = sample_batch(toy, r2, 8, draw_group(r2, 4))
        q, _ = adv_erm_step(q, batch, plain, r2)
        assert p.equals(q)


def test_higher_loss_group_weight_rises_whenever_sampled():
    # group 1 rows have random labels, group 0 rows are trivially separable
    rng = np.random.default_rng(0)
    x = rng.standard_normal((200, 2))
    y = np.r_[(x[:100, 0] > 0).astype(int), rng.integers(0, 2, 100)]
    x[:100, 0] *= 20
    ds = GroupedDataset(x, y, np.r_[np.zeros(100, int), np.ones(100, int)], n_groups=2)
    cfg = TrainConfig("gdro", eta_theta=0.05, batch_size=16, eta_q=0.1, hidden=())
    params = M.init_params([2, 2], rng=rng)
    w = dro.init_uniform(2, 0.1)
    for _ in range(100):
        before = w.q[1]
        params, w, g, _ = gdro_step(params, w, ds, cfg, rng)
        if g == 1:
            assert w.q[1] > before


def _two_group_logistic(seed=0):
    rng = np.random.default_rng(seed)
    n0, n1 = 900, 100
    y = rng.integers(0, 2, n0 + n1)
    s = 2 * y - 1
    x = np.empty((n0 + n1, 2))
    x[:n0] = s[:n0, None] * np.array([1.0, 0.0]) + 0.8 * rng.standard_normal((n0, 2))
    x[n0:] = s[n0:, None] * np.array([0.3, 1.0]) + 0.8 * rng.standard_normal((n1, 2))
    return GroupedDataset(x, y, np.r_[np.zeros(n0, int), np.ones(n1, int)], n_groups=2)


def _worst_loss(params, ds):
    per = M.cross_entropy(M.forward(params, ds.features), ds.labels)
    return max(per[ix].mean() for ix in ds.group_index)


def test_group_dro_lowers_worst_group_loss_on_convex_instance():
    ds = _two_group_logistic()
    kw = dict(total_steps=2000, batch_size=32, hidden=(), eta_theta=0.1)
    erm = train(TrainConfig("erm", **kw), ds)
    gdro = train(TrainConfig("gdro", eta_q=0.05, **kw), ds)
    assert _worst_loss(gdro.final_params, ds) <= _worst_loss(erm.final_params, ds)


def test_adversarial_training_separates_margin_instance():
    # points at +-(1, 0) with jitter bounded by 0.2 have margin 0.8 > 2 * 0.25
    rng = np.random.default_rng(1)
    y = rng.integers(0, 2, 200)
    x = (2 * y - 1)[:, None] * np.array([1.0, 0.0]) + rng.uniform(-0.2, 0.2, (200, 2))
    ds = GroupedDataset(x, y, y, n_groups=2)
    attack = AttackConfig(epsilon=0.25, eta_delta=0.1, steps=5, sigma=0.0625)
    rec = train(TrainConfig("adv_erm", eta_theta=0.5, total_steps=500, batch_size=32, attack=attack, hidden=()),
                ds)
    rep = evaluate(rec.final_params, ds, AttackConfig(epsilon=0.25, eta_delta=0.1, steps=5, sigma=0.0),
                   np.random.default_rng(0))
    assert rep.adversarial_acc == 1.0


def test_erm_fails_on_pure_spurious_instance():
    spec = SpuriousSpec({"train": (1000, 20, 20, 1000), "test": (200, 200, 200, 200)}, core_strength=0.0,
                        spurious_strength=3.0, seed=2)
    splits = generate(spec)
    rec = train(TrainConfig("erm", total_steps=500, batch_size=64), splits["train"])
    rep = evaluate(rec.final_params, splits["test"])
    majority = min(rep.per_group_acc[0], rep.per_group_acc[3])
    assert rep.robust_acc < 0.5 and majority > 0.9


def test_selection_keeps_best_validation_checkpoint(toy):
    rec = train(TrainConfig("gdro", total_steps=60, batch_size=8, eta_q=0.1, eval_every=10), toy, toy)
    scores = [rep.robust_acc for _, rep in rec.evals]
    best = int(np.argmax(scores))
    assert rec.best_step == rec.evals[best][0]
    assert [s for s, _ in rec.evals] == [0, 10, 20, 30, 40, 50, 60]


def test_mixture_sampling_runs_and_keeps_simplex(toy):
    rec = train(TrainConfig("adv_gdro", total_steps=30, batch_size=16, attack=ATTACK, eta_q=0.2,
                            sampling="mixture_batch"), toy)
    assert abs(rec.weights.q.sum() - 1) < 1e-12
    assert np.all(rec.step_group == -1)


def test_momentum_changes_trajectory(toy):
    a = train(TrainConfig("erm", total_steps=20, batch_size=8), toy)
    b = train(TrainConfig("erm", total_steps=20, batch_size=8, momentum=0.9), toy)
    assert not a.final_params.equals(b.final_params)
