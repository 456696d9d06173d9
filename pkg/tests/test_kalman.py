import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import condition_last_state, dense_predict, dense_update, mc_predictive

from trafficpf.kalman import (
    KalmanStats,
    kalman_step,
    mixture_predictive_loglik,
    predict,
    predictive_loglik,
    update,
)
from trafficpf.model import DEFAULT_TRANSITION, REGIMES, DimensionMismatch, Regime, default_spec
from trafficpf.regime_kernel import FixedKernel

regimes = st.sampled_from(REGIMES)


def _stats(m, C):
    return KalmanStats(np.asarray(m, dtype=float), np.asarray(C, dtype=float))


def _random_cov(rng, scale=3.0):
    A = rng.normal(size=(2, 2)) * scale
    return A @ A.T + 0.01 * np.eye(2)


def test_predict_default_case(spec):
    pred = predict(_stats([63, 0], np.zeros((2, 2))), Regime.FREE_FLOW, None, spec)
    assert pred.y_mean == 63.0
    assert pred.y_var == pytest.approx(5.9, abs=1e-14)
    np.testing.assert_array_equal(pred.Cf, spec.evo_cov[1])


@pytest.mark.parametrize("regime", REGIMES)
def test_noise_free_prediction(regime):
    spec = default_spec(evo_cov=np.zeros((2, 2)))
    pred = predict(_stats([55, 1.5], np.zeros((2, 2))), regime, None, spec)
    np.testing.assert_array_equal(pred.Cf, np.zeros((2, 2)))
    assert pred.y_var == 4.0


def test_predict_matches_dense(spec):
    m, C = np.array([50.0, 3.0]), np.diag([4.0, 1.0])
    pred = predict(_stats(m, C), Regime.RECOVERY, None, spec)
    mf, Cf, y_mean, y_var = dense_predict(m, C, 1, 0.5, 63.0, spec.evo_cov[2], spec.h_row, 4.0)
    np.testing.assert_allclose(pred.mf, mf, atol=1e-12)
    np.testing.assert_allclose(pred.Cf, Cf, atol=1e-12)
    assert pred.y_mean == pytest.approx(y_mean, abs=1e-12)
    assert pred.y_var == pytest.approx(y_var, abs=1e-12)


def test_update_with_certain_prior_ignores_data():
    spec = default_spec(evo_cov=np.zeros((2, 2)))
    pred = predict(_stats([60, 0], np.zeros((2, 2))), Regime.FREE_FLOW, None, spec)
    post = update(pred, 10.0, Regime.FREE_FLOW, spec)
    np.testing.assert_array_equal(post.m, pred.mf)


def test_update_with_uninformative_measurement():
    spec = default_spec(obs_var=1e12, evo_cov=np.zeros((2, 2)))
    pred = predict(_stats([60, 0], np.eye(2)), Regime.RECOVERY, None, spec)
    post = update(pred, 0.0, Regime.RECOVERY, spec)
    assert np.max(np.abs(post.m - pred.mf)) <= 1e-9 * np.max(np.abs(pred.mf))


def test_full_step_matches_joint_conditioning(spec):
    m0, C0 = np.array([60.0, 0.0]), np.eye(2)
    post = kalman_step(_stats(m0, C0), Regime.FREE_FLOW, 55.0, spec)
    m, C, _ = condition_last_state([0], [55.0], m0, C0, 0.5, 63.0, spec.evo_cov, spec.h_row, 4.0)
    np.testing.assert_allclose(post.m, m, atol=1e-10)
    np.testing.assert_allclose(post.C, C, atol=1e-10)


def test_missing_observation_is_predict_only(spec):
    s = _stats([60, 1], np.eye(2))
    post = kalman_step(s, Regime.BREAKDOWN, float("nan"), spec)
    pred = predict(s, Regime.BREAKDOWN, None, spec)
    np.testing.assert_array_equal(post.m, pred.mf)
    np.testing.assert_array_equal(post.C, pred.Cf)


def test_regressor_length_checked():
    spec = default_spec(gamma=[1.0, 2.0])
    with pytest.raises(DimensionMismatch):
        predict(_stats([60, 0], np.eye(2)), Regime.FREE_FLOW, [1.0], spec)


def test_predictive_loglik_at_mode(spec):
    s = _stats([63, 0], np.zeros((2, 2)))
    assert predictive_loglik(s, Regime.FREE_FLOW, None, 63.0, spec) == pytest.approx(
        -0.5 * math.log(2 * math.pi * 5.9), abs=1e-14
    )


def test_predictive_loglik_monte_carlo(spec, rng):
    m, C = np.array([58.0, -1.0]), np.array([[3.0, 0.4], [0.4, 0.8]])
    for regime in REGIMES:
        y = 57.0
        est, se = mc_predictive(m, C, int(regime), 0.5, 63.0, spec.evo_cov[regime.index], spec.h_row, 4.0, y,
                                200_000, rng)
        exact = math.exp(predictive_loglik(_stats(m, C), regime, None, y, spec))
        assert abs(est - exact) < 4 * se


def test_mixture_degenerate_row(spec):
    kernel = FixedKernel(np.array([[1.0, 0, 0], [1.0, 0, 0], [1.0, 0, 0]]))
    s = _stats([50, -2], np.eye(2))
    mix = mixture_predictive_loglik(s, Regime.FREE_FLOW, None, kernel, None, 47.0, spec)
    assert mix == pytest.approx(predictive_loglik(s, Regime.BREAKDOWN, None, 47.0, spec), abs=1e-12)


@pytest.mark.parametrize("row", [np.full(3, 1 / 3), DEFAULT_TRANSITION[1]])
def test_mixture_direct_sum(spec, row):
    kernel = FixedKernel(np.tile(row, (3, 1)))
    s = _stats([61, 0.5], np.diag([2.0, 1.0]))
    m, C = s.m, s.C
    total = 0.0
    for p, code in zip(row, (-1, 0, 1)):
        _, _, mu, var = dense_predict(m, C, code, 0.5, 63.0, spec.evo_cov[code + 1], spec.h_row, 4.0)
        total += p * math.exp(-0.5 * (60.0 - mu) ** 2 / var) / math.sqrt(2 * math.pi * var)
    mix = mixture_predictive_loglik(s, Regime.FREE_FLOW, None, kernel, None, 60.0, spec)
    assert mix == pytest.approx(math.log(total), abs=1e-12)


@st.composite
def kalman_cases(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    m = rng.normal([60, 0], [10, 3])
    C = _random_cov(rng)
    regime = draw(st.sampled_from(REGIMES))
    y = float(rng.normal(m[0], 8))
    return m, C, regime, y


@settings(max_examples=200, deadline=None)
@given(kalman_cases())
def test_update_shrinks_covariance(case):
    m, C, regime, y = case
    spec = default_spec()
    s = _stats(m, C)
    pred = predict(s, regime, None, spec)
    post = update(pred, y, regime, spec)
    assert np.linalg.eigvalsh(pred.Cf - post.C).min() >= -1e-10
    assert abs(post.C[0, 1] - post.C[1, 0]) <= 1e-12
    assert np.linalg.eigvalsh(post.C).min() >= -1e-10
    dm, dC = dense_update(pred.mf, pred.Cf, pred.y_mean, pred.y_var, y, spec.h_row)
    np.testing.assert_allclose(post.m, dm, atol=1e-9)
    np.testing.assert_allclose(post.C, dC, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(kalman_cases(), st.sampled_from(REGIMES))
def test_mixture_between_components(case, alpha):
    m, C, _, y = case
    spec = default_spec()
    kernel = FixedKernel(DEFAULT_TRANSITION)
    s = _stats(m, C)
    comps = [predictive_loglik(s, a, None, y, spec) for a in REGIMES]
    mix = mixture_predictive_loglik(s, alpha, None, kernel, None, y, spec)
    assert min(comps) - 1e-12 <= mix <= max(comps) + 1e-12


@settings(max_examples=100, deadline=None)
@given(kalman_cases(), st.floats(-50, 50))
def test_offset_invariance(case, c):
    m, C, regime, y = case
    base = predictive_loglik(_stats(m, C), regime, None, y, default_spec())
    shifted = predictive_loglik(_stats(m, C), regime, [1.0], y + c, default_spec(gamma=[c]))
    assert shifted == pytest.approx(base, abs=1e-12)
