"""Regime-conditional Kalman recursions and predictive likelihoods.

The array functions (``predict_arrays``, ``update_arrays``) broadcast over
leading axes so the particle filter can push every particle/regime pair
through one call; the scalar API below is a thin wrapper over them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .model import (
    REGIMES,
    DimensionMismatch,
    ModelSpec,
    Regime,
    gaussian_logdensity,
)

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class KalmanStats:
    """Posterior moments ``(m, C)`` of the state given a regime path."""

    m: np.ndarray
    C: np.ndarray

    @classmethod
    def prior(cls, spec: ModelSpec) -> "KalmanStats":
        return cls(spec.prior_mean.copy(), spec.prior_cov.copy())


@dataclass(frozen=True)
class Prediction:
    mf: np.ndarray
    Cf: np.ndarray
    y_mean: float
    y_var: float


def normal_logpdf(y, mean, var):
    """Elementwise univariate normal log-density."""
    d = y - mean
    return -0.5 * (_LOG_2PI + np.log(var) + d * d / var)


def predict_arrays(m, C, codes, spec: ModelSpec, obs_var=None, offset=0.0):
    """One-step prediction for stacked moments.

    ``m`` is ``(..., 2)``, ``C`` is ``(..., 2, 2)`` and ``codes`` holds regime
    codes broadcastable against the leading axes.  ``obs_var`` overrides
    ``spec.obs_var[codes]`` (already selected per element) and ``offset`` is
    the regression term ``gamma^T z``.

    Written out element by element: with ``G = [[F, a], [0, 1]]`` the
    products ``G m`` and ``G C G^T`` need only a handful of multiplies.
    """
    codes = np.asarray(codes)
    F = np.where(codes == 0, spec.f0, 1.0)
    a = codes.astype(float)
    W = spec.evo_cov[codes + 1]
    m0, m1 = m[..., 0], m[..., 1]
    c00, c01, c11 = C[..., 0, 0], C[..., 0, 1], C[..., 1, 1]

    shape = np.broadcast_shapes(m0.shape, codes.shape)
    mf = np.empty(shape + (2,))
    # (I - G) mu = ((1 - F) v_free, 0) since mu has no rate component.
    mf[..., 0] = F * m0 + a * m1 + (1.0 - F) * spec.v_free
    mf[..., 1] = m1
    Cf = np.empty(shape + (2, 2))
    Fc01 = F * c01
    Cf[..., 0, 0] = F * F * c00 + 2.0 * a * Fc01 + a * a * c11 + W[..., 0, 0]
    off = Fc01 + a * c11 + 0.5 * (W[..., 0, 1] + W[..., 1, 0])
    Cf[..., 0, 1] = off
    Cf[..., 1, 0] = off
    Cf[..., 1, 1] = c11 + W[..., 1, 1]

    h0, h1 = spec.h_row
    if obs_var is None:
        obs_var = spec.obs_var[codes + 1]
    y_mean = h0 * mf[..., 0] + h1 * mf[..., 1] + offset
    # H Cf H^T (the transpose placement that keeps this a scalar).
    y_var = obs_var + h0 * h0 * Cf[..., 0, 0] + 2.0 * h0 * h1 * off + h1 * h1 * Cf[..., 1, 1]
    return mf, Cf, y_mean, y_var


def update_arrays(mf, Cf, y_mean, y_var, y, h, obs_var):
    """Measurement update in Joseph form, ``(I - K H) Cf (I - K H)^T + V K K^T``."""
    h0, h1 = h
    p00, p01, p11 = Cf[..., 0, 0], Cf[..., 0, 1], Cf[..., 1, 1]
    k0 = (h0 * p00 + h1 * p01) / y_var
    k1 = (h0 * p01 + h1 * p11) / y_var
    e = y - y_mean
    m = np.empty(mf.shape)
    m[..., 0] = mf[..., 0] + k0 * e
    m[..., 1] = mf[..., 1] + k1 * e
    a00, a01, a10, a11 = 1.0 - k0 * h0, -k0 * h1, -k1 * h0, 1.0 - k1 * h1
    b00 = a00 * p00 + a01 * p01
    b01 = a00 * p01 + a01 * p11
    b10 = a10 * p00 + a11 * p01
    b11 = a10 * p01 + a11 * p11
    v = np.asarray(obs_var)
    C = np.empty(Cf.shape)
    C[..., 0, 0] = b00 * a00 + b01 * a01 + v * k0 * k0
    off = 0.5 * ((b00 * a10 + b01 * a11) + (b10 * a00 + b11 * a01)) + v * k0 * k1
    C[..., 0, 1] = off
    C[..., 1, 0] = off
    C[..., 1, 1] = b10 * a10 + b11 * a11 + v * k1 * k1
    return m, C


def predict(s: KalmanStats, regime: Regime, z, spec: ModelSpec) -> Prediction:
    offset = spec.regressor_offset(z)
    mf, Cf, y_mean, y_var = predict_arrays(
        np.asarray(s.m, dtype=float), np.asarray(s.C, dtype=float), int(Regime(regime)), spec, offset=offset
    )
    return Prediction(mf, Cf, float(y_mean), float(y_var))


def update(pred: Prediction, y: float, regime: Regime, spec: ModelSpec) -> KalmanStats:
    obs_var = spec.obs_var[Regime(regime).index]
    m, C = update_arrays(
        pred.mf, pred.Cf, np.asarray(pred.y_mean), np.asarray(pred.y_var), float(y), spec.h_row, obs_var
    )
    return KalmanStats(m, C)


def kalman_step(s: KalmanStats, regime: Regime, y: float, spec: ModelSpec, z=None) -> KalmanStats:
    """Predict then update; a missing ``y`` (NaN) returns the prediction."""
    pred = predict(s, regime, z, spec)
    if y is None or not np.isfinite(y):
        return KalmanStats(pred.mf, pred.Cf)
    return update(pred, y, regime, spec)


def predictive_loglik(s: KalmanStats, regime: Regime, z, y: float, spec: ModelSpec) -> float:
    pred = predict(s, regime, z, spec)
    return gaussian_logdensity([y], [pred.y_mean], [[pred.y_var]])


def mixture_predictive_loglik(s: KalmanStats, alpha_t: Regime, Z, kernel, z, y: float, spec: ModelSpec) -> float:
    """log sum_a p(a | alpha_t, Z) phi(y; mu_y(a), V_p(a))."""
    probs = kernel.transition_probs(alpha_t, Z)
    terms = np.array([predictive_loglik(s, a, z, y, spec) for a in REGIMES])
    with np.errstate(divide="ignore"):
        logp = np.log(probs)
    return float(logsumexp(terms + logp))


def check_regressors(z, spec: ModelSpec) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z if z is not None else (), dtype=float)).reshape(-1)
    if z.shape[0] != spec.n_regressors:
        raise DimensionMismatch(f"regressor vector has length {z.shape[0]}, gamma has {spec.n_regressors}")
    return z
