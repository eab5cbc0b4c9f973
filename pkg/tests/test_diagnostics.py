import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthobo.acquisition import CvConfig
from orthobo.diagnostics import (
    GpState,
    LinearGaussianState,
    TpeState,
    cantelli_bound,
    cantelli_check,
    oracle_values,
    pairwise_cantelli,
    percent_change,
    ranking_stability,
    tilt_check,
    tilt_from_samples,
    variance_probe,
)
from orthobo.errors import InsufficientRepeats, NonpositiveGap
from orthobo.gp import ObservationSet, ParamPosterior
from orthobo.mathcore import make_rng


def _linear_state(seed=0, isotropic=False):
    rng = make_rng(seed)
    A = rng.standard_normal((3, 3))
    cov = 0.5 * np.eye(3) if isotropic else A @ A.T + 0.2 * np.eye(3)
    q = ParamPosterior.from_cov(rng.standard_normal(3), cov)
    a = rng.standard_normal(3)
    return LinearGaussianState(a / np.linalg.norm(a), 0.7, q)


# --- variance probes ------------------------------------------------------------------


def test_degenerate_posterior_gives_zero_probe_variance(gp1d):
    fit, q = gp1d
    state = GpState(fit, ParamPosterior.from_cov(fit.theta, np.zeros_like(q.cov)))
    rep = variance_probe(state, n_probes=8, repeats=4, S=8)
    for est in ("mc-ei", "orth-ei"):
        np.testing.assert_array_equal(rep.probe_variance(est), 0.0)


def test_replayed_seeds_give_zero_variance(gp1d):
    rep = variance_probe(GpState(*gp1d), n_probes=8, S=16, repeat_seeds=[5, 5])
    assert rep.mean_probe_variance("mc-ei") == 0.0
    assert rep.mean_probe_variance("orth-ei") == 0.0


def test_probe_report_shapes_and_serialization(gp3d):
    rep = variance_probe(GpState(*gp3d), n_probes=10, repeats=3, S=12, seed=2)
    assert rep.values["mc-ei"].shape == (10, 3)
    assert rep.R == 3 and rep.S == 12
    doc = rep.to_json()
    assert doc["S"] == 12 and len(doc["seeds"]) == 3
    assert doc["estimators"]["orth-ei"]["mean_probe_variance"] == rep.mean_probe_variance("orth-ei")
    rows = list(rep.rows())
    assert len(rows) == 2 * 10 * 3
    assert rows[0][:3] == (0, 0, "mc-ei")


def test_probe_leaves_state_untouched(gp3d):
    state = GpState(*gp3d)
    before = state.fingerprint()
    theta = state.fit.theta.copy()
    variance_probe(state, n_probes=6, repeats=3, S=8)
    assert state.fingerprint() == before
    np.testing.assert_array_equal(state.fit.theta, theta)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 1000), S=st.integers(5, 64))
def test_in_sample_variance_identity(gp3d, seed, S):
    rep = variance_probe(GpState(*gp3d), n_probes=12, repeats=2, S=S, seed=seed)
    raw, orth = rep.sample_var["mc-ei"], rep.sample_var["orth-ei"]
    assert np.all(orth <= raw * (1 + 1e-9) + 1e-300)


def test_linear_gaussian_probe_exact():
    state = _linear_state(1)
    rep = variance_probe(state, n_probes=4, repeats=8, S=512)
    assert rep.mean_sample_variance("orth-ei") < 1e-3 * rep.mean_sample_variance("mc-ei")
    np.testing.assert_allclose(rep.values["orth-ei"], 0.7 + state.a @ state.q.mean, atol=1e-8)


def test_tpe_state_probe_runs():
    X = make_rng(0).random((20, 2))
    state = TpeState(ObservationSet(X, np.sum(X**2, axis=1)))
    rep = variance_probe(state, ("tpe-mc", "tpe-orth"), n_probes=6, repeats=3, S=8)
    np.testing.assert_allclose(rep.values["tpe-orth"], rep.values["tpe-mc"], rtol=1e-9)
    assert rep.mean_sample_variance("tpe-orth") <= rep.mean_sample_variance("tpe-mc")


def test_percent_change():
    assert percent_change(2.0, 1.0) == -50.0
    assert percent_change(1.0, 1.0) == 0.0


# --- ranking -----------------------------------------------------------------------------


def test_constant_report_is_perfectly_stable():
    V = np.tile(np.arange(10.0)[:, None], (1, 5))
    assert ranking_stability(V) == (1.0, 0.0)


def test_ranking_needs_two_repeats():
    with pytest.raises(InsufficientRepeats):
        ranking_stability(np.ones((4, 1)))


def test_ranking_permutation_null():
    V = make_rng(0).random((200, 4000))
    agree, flip = ranking_stability(V, K=8)
    assert agree < 0.02
    assert flip == pytest.approx(0.5, abs=0.03)


def test_ranking_hand_example():
    # probe 0 leads on average; repeat 2 flips the leading pair
    V = np.array([[3.0, 3.0, 1.0], [2.0, 2.0, 2.5], [0.0, 0.0, 0.0]])
    agree, flip = ranking_stability(V, K=3)
    assert agree == pytest.approx(2 / 3)
    assert flip == pytest.approx(1 / 6)


# --- Cantelli --------------------------------------------------------------------------


def test_cantelli_examples():
    assert cantelli_bound(0.0, 1.0) == 0.0
    assert cantelli_bound(4.0, 2.0) == 0.5
    assert cantelli_bound(3.0, 1.0) == 0.75
    assert cantelli_check(1.0, 0.0, 0, 10).satisfied
    assert not cantelli_check(1.0, 0.0, 1, 10).satisfied
    with pytest.raises(NonpositiveGap):
        cantelli_check(0.0, 1.0, 0, 10)


@settings(max_examples=100, deadline=None)
@given(v1=st.floats(0, 100), v2=st.floats(0, 100), d1=st.floats(0.01, 10), d2=st.floats(0.01, 10))
def test_cantelli_monotonicity(v1, v2, d1, d2):
    lo, hi = sorted([v1, v2])
    assert cantelli_bound(lo, d1) <= cantelli_bound(hi, d1)
    small, big = sorted([d1, d2])
    assert cantelli_bound(v1, big) <= cantelli_bound(v1, small)


def test_cantelli_holds_for_gaussian_differences():
    rng = make_rng(3)
    ok = 0
    for k in range(50):
        delta, sd = 0.1 + k * 0.02, 0.5
        draws = rng.normal(delta, sd, 64)
        ok += cantelli_check(delta, draws.var(ddof=1), int(np.sum(draws <= 0)), 64).satisfied
    assert ok >= 48


def test_oracle_values_match_large_sample_mean():
    state = _linear_state(2)
    v = oracle_values(state, np.zeros((2, 1)), S=50_000, chunk=8192)
    expected = 0.7 + state.a @ state.q.mean
    sd = math.sqrt(state.a @ state.q.cov @ state.a / 50_000)
    assert abs(v[0] - expected) <= 5 * sd
    assert v[0] == v[1]


def test_pairwise_cantelli_on_gp_state(gp1d):
    state = GpState(*gp1d)
    P = np.linspace(0.05, 0.95, 12)[:, None]
    oracle = oracle_values(state, P, S=4096)
    checks = pairwise_cantelli(state, P, oracle, K=4, repeats=16, S=32)
    assert len(checks) == 6
    for c in checks:
        assert c.delta > 0
        assert set(c.result) == {"mc-ei", "orth-ei"}


# --- tilt ---------------------------------------------------------------------------------


def test_tilt_zero_direction():
    state = _linear_state(0)
    r = tilt_check(state, np.zeros(1), np.zeros(3), S=512)
    assert r.orth_derivative == 0.0 and r.raw_derivative == 0.0


def test_tilt_linear_gaussian():
    # the relative ridge biases the orthogonalized derivative by about 1e-8 * |a^T b| here
    state = _linear_state(4, isotropic=True)
    b = make_rng(9).standard_normal(3)
    b /= np.linalg.norm(b)
    r = tilt_check(state, np.zeros(1), b, S=4096, rng=make_rng(10))
    assert abs(r.orth_derivative) <= 1e-8
    # under the tilt exp(eps b^T g) the mean of a^T theta moves by -a^T b
    assert r.raw_derivative == pytest.approx(-state.a @ b, abs=4 * r.raw_se)


def test_tilt_linear_gaussian_without_ridge():
    # the default ridge leaves a residual of order ridge * |a^T b|; without it only rounding remains
    state = _linear_state(4)
    b = np.array([0.0, 0.6, 0.8])
    r = tilt_check(state, np.zeros(1), 5.0 * b, S=4096, rng=make_rng(11), cfg=CvConfig(ridge=0.0))
    assert abs(r.orth_derivative) <= 1e-10


def test_tilt_derivative_is_sample_covariance():
    rng = make_rng(5)
    h, cv = rng.standard_normal(300), rng.standard_normal((300, 2))
    b = np.array([0.6, 0.8])
    r = tilt_from_samples(h, cv, b, eps=1e-4, cfg=CvConfig(enabled=False))
    u = cv @ b
    assert r.raw_derivative == pytest.approx(np.mean((h - h.mean()) * (u - u.mean())), rel=1e-6)


def test_tilt_eps_validated():
    with pytest.raises(ValueError):
        tilt_from_samples(np.zeros(4), np.zeros((4, 1)), np.ones(1), eps=0.1)
