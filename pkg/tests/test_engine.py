import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import orthobo.engine as engine
from orthobo.acquisition import CvConfig
from orthobo.engine import RunConfig, best_so_far, optimize_acquisition, run_bo
from orthobo.errors import NumericalFailure
from orthobo.mathcore import make_rng, sobol_points, sub_seed

# small optimizer and fit budgets keep these runs to a few seconds
FAST = dict(raw_samples=64, restarts=2, local_budget=24, fit_budget=60, fit_restarts=2, mc_samples=16, n_init=6)


def _cfg(**kw):
    base = dict(FAST)
    base.update(kw)
    return RunConfig(**base)


# --- regret ------------------------------------------------------------------------


def test_best_so_far_examples():
    np.testing.assert_array_equal(best_so_far([3.0, 1.0, 2.0], 0.0), [3.0, 1.0, 1.0])
    assert best_so_far([2.0, -1.0], -1.0)[-1] == 0.0
    r = best_so_far([5.0, 4.0, 3.0, 2.0], 0.0)
    assert np.all(np.diff(r) < 0)


# --- acquisition maximization ------------------------------------------------------------


def test_optimizer_finds_quadratic_centre():
    x = optimize_acquisition(lambda X: -np.sum((X - 0.5) ** 2, axis=1), 2, rng=make_rng(0))
    assert np.max(np.abs(x - 0.5)) <= 5e-3


def test_optimizer_degenerate_budget_returns_screening_point():
    rng = make_rng(3)
    x = optimize_acquisition(lambda X: X[:, 0], 3, raw_samples=1, restarts=1, local_budget=0, rng=rng)
    expected = sobol_points(3, 1, scramble_seed=sub_seed(make_rng(3)))[0]
    np.testing.assert_array_equal(x, expected)
    x0 = optimize_acquisition(lambda X: X[:, 0], 3, raw_samples=1, restarts=1, local_budget=0)
    np.testing.assert_array_equal(x0, np.zeros(3))


def test_optimizer_deterministic_and_in_box():
    def f(X):
        return np.sin(7 * X[:, 0]) * np.cos(5 * X[:, 1]) + X[:, 2]

    a = optimize_acquisition(f, 3, rng=make_rng(8))
    b = optimize_acquisition(f, 3, rng=make_rng(8))
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= 1))


def test_optimizer_ignores_nonfinite_scores():
    def f(X):
        out = -np.sum((X - 0.25) ** 2, axis=1)
        out[X[:, 0] > 0.6] = np.nan
        return out

    x = optimize_acquisition(f, 2, rng=make_rng(1))
    assert np.max(np.abs(x - 0.25)) <= 5e-3


def test_optimizer_validates_restarts():
    with pytest.raises(ValueError):
        optimize_acquisition(lambda X: X[:, 0], 2, raw_samples=4, restarts=5)


# --- configuration ------------------------------------------------------------------


def test_config_defaults_and_validation():
    c = RunConfig("hartmann6", 5)
    assert c.models == ("matern52-ard",) and c.n_init == 32 and c.mc_samples == 512
    assert RunConfig("hartmann6", 5, "tpe-orth").models == ("tpe",)
    with pytest.raises(ValueError):
        RunConfig("hartmann6", 5, "ucb")
    with pytest.raises(ValueError):
        RunConfig("hartmann6", 5, models=("spline",))
    with pytest.raises(ValueError):
        RunConfig("hartmann6", 5, "lcb", models=("tpe",))
    with pytest.raises(KeyError):
        RunConfig("nope", 5)


def test_config_round_trip():
    c = _cfg(objective="ackley:3", budget=4, cv=CvConfig(ridge=1e-6, cross_fit=True), models=("rbf-iso", "tpe"))
    again = RunConfig.from_dict(json.loads(json.dumps(c.to_dict())))
    assert again == c


# --- the loop -----------------------------------------------------------------------


def test_zero_budget_keeps_initial_design():
    tr = run_bo(_cfg(objective="ackley:3", budget=0, method="orth-ei"))
    assert len(tr.records) == 6
    assert tr.best_y == min(r.y_raw for r in tr.records)
    assert tr.regret.shape == (1,)


def test_trace_json_schema():
    tr = run_bo(_cfg(objective="quadratic:2", budget=2))
    doc = json.loads(tr.dumps())
    assert set(doc) == {"config", "iterations", "best"}
    it = doc["iterations"][-1]
    assert set(it) == {"t", "lambda", "y_raw", "corrupted", "f_star", "regret", "weights", "acq_value", "step_ms"}
    assert it["t"] == 2 and len(it["lambda"]) == 2 and it["weights"] == [1.0]
    assert set(doc["best"]) == {"lambda", "y"}
    assert len(tr.step_ms) == 2


def test_byte_identical_reruns():
    c = _cfg(objective="ackley:3", budget=3, models=("rbf-iso", "matern52-ard"))
    assert run_bo(c).dumps() == run_bo(c).dumps()


def test_disabled_overlay_replays_mc():
    mc = run_bo(_cfg(objective="levy:3", budget=3, method="mc-ei"))
    off = run_bo(_cfg(objective="levy:3", budget=3, method="orth-ei", cv=CvConfig(enabled=False)))
    assert json.dumps(mc.to_json()["iterations"]) == json.dumps(off.to_json()["iterations"])


def test_estimators_share_initial_design():
    mc = run_bo(_cfg(objective="levy:3", budget=2, method="mc-ei"))
    orth = run_bo(_cfg(objective="levy:3", budget=2, method="orth-ei"))
    for a, b in zip(mc.records[:6], orth.records[:6]):
        assert a == b


def test_seeds_give_different_designs():
    a = run_bo(_cfg(objective="ackley:3", budget=0, seed=0))
    b = run_bo(_cfg(objective="ackley:3", budget=0, seed=1))
    assert a.records[0].lam != b.records[0].lam


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), method=st.sampled_from(["sobol-random", "lcb", "tpe-mc"]))
def test_regret_nonincreasing_and_nonnegative(seed, method):
    tr = run_bo(_cfg(objective="ackley:2", budget=4, method=method, seed=seed, tpe_bootstrap=4))
    r = np.array([rec.regret for rec in tr.records])
    assert np.all(np.diff(r) <= 0) and np.all(r >= 0)


@pytest.mark.parametrize("method", ["tpe-mc", "tpe-orth", "lcb", "sobol-random"])
def test_other_methods_run(method):
    tr = run_bo(_cfg(objective="michalewicz:3", budget=3, method=method, tpe_bootstrap=8))
    assert len(tr.records) == 9
    assert all(np.all((np.array(r.lam) >= 0) & (np.array(r.lam) <= 1)) for r in tr.records)


def test_mixed_ensemble_weights_stay_on_simplex():
    tr = run_bo(_cfg(objective="quadratic:2", budget=4, models=("rbf-iso", "tpe"), tpe_bootstrap=8))
    for rec in tr.records[6:]:
        assert len(rec.weights) == 2 and sum(rec.weights) == pytest.approx(1.0, abs=1e-12)
    # the first BO step has no previous observation to score
    assert tr.records[6].weights == [0.5, 0.5]
    assert tr.records[-1].weights != [0.5, 0.5]


def test_outliers_corrupt_used_values_but_not_regret():
    tr = run_bo(_cfg(objective="quadratic:2", budget=3, method="sobol-random", outlier_prob=1.0))
    bo = tr.records[6:]
    assert all(r.corrupted for r in bo)
    assert not any(r.corrupted for r in tr.records[:6])
    clean = run_bo(_cfg(objective="quadratic:2", budget=3, method="sobol-random"))
    assert [r.regret for r in tr.records] == [r.regret for r in clean.records]
    assert all(a.y_raw > b.y_raw for a, b in zip(bo, clean.records[6:]))


def test_surrogate_failure_falls_back_to_design(monkeypatch):
    def broken(*args, **kwargs):
        raise NumericalFailure("boom")

    monkeypatch.setattr(engine, "fit_map", broken)
    tr = run_bo(_cfg(objective="quadratic:2", budget=3, method="orth-ei"))
    ref = run_bo(_cfg(objective="quadratic:2", budget=3, method="sobol-random"))
    assert all(r.fallback for r in tr.records[6:])
    assert [r.lam for r in tr.records] == [r.lam for r in ref.records]


def test_quadratic_sanity_over_seeds():
    wins = 0
    for seed in range(16):
        tr = run_bo(RunConfig("quadratic:1", 20, "orth-ei", n_init=5, mc_samples=64, seed=seed))
        wins += tr.final_regret < tr.records[4].regret
    assert wins >= 14
