"""Conditional sufficient statistics and conjugate draws for static parameters.

Learnable parameters are the per-regime observation variances ``V_r`` and
the regression coefficients ``gamma``.  Given a realised state draw the
statistics evolve deterministically:

    n_r   += 1
    ss_r  += (y - H x - gamma^T z)^2
    Lam_r += z z^T
    b_r   += z (y - H x)

for the regime ``r`` active at that step.  Keeping ``Lam`` and ``b`` per
regime lets the gamma draw weight each step by its own variance.
All functions broadcast over a leading particle axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DimensionMismatch, ModelSpec


class NonConjugateConfig(ValueError):
    pass


@dataclass
class ParamSuffStats:
    n: np.ndarray    # (..., 3) observation counts per regime
    ss: np.ndarray   # (..., 3) summed squared residuals
    Lam: np.ndarray  # (..., 3, p, p)
    b: np.ndarray    # (..., 3, p)

    @classmethod
    def empty(cls, n_regressors: int, shape: tuple = ()) -> "ParamSuffStats":
        p = n_regressors
        return cls(
            np.zeros(shape + (3,)),
            np.zeros(shape + (3,)),
            np.zeros(shape + (3, p, p)),
            np.zeros(shape + (3, p)),
        )

    def take(self, idx) -> "ParamSuffStats":
        return ParamSuffStats(self.n[idx], self.ss[idx], self.Lam[idx], self.b[idx])

    def copy(self) -> "ParamSuffStats":
        return ParamSuffStats(self.n.copy(), self.ss.copy(), self.Lam.copy(), self.b.copy())


@dataclass
class LearningPriors:
    """Conjugate priors: ``V_r ~ InvGamma(a0, b0)`` and ``gamma ~ N(mean, precision^-1)``.

    ``learn_gamma=None`` learns gamma whenever the model has regressors.
    With ``pooled_obs_var`` one variance is shared by all regimes, drawn from
    the statistics summed over regimes.
    """

    a0: float | np.ndarray = 2.0
    b0: float | np.ndarray = 4.0
    gamma_mean: np.ndarray | None = None
    gamma_precision: np.ndarray | None = None
    learn_obs_var: bool = True
    learn_gamma: bool | None = None
    pooled_obs_var: bool = False

    def resolved(self, spec: ModelSpec) -> "LearningPriors":
        p = spec.n_regressors
        a0 = np.broadcast_to(np.asarray(self.a0, dtype=float), (3,)).copy()
        b0 = np.broadcast_to(np.asarray(self.b0, dtype=float), (3,)).copy()
        if np.any(~(a0 > 0)) or np.any(~(b0 > 0)):
            raise NonConjugateConfig("inverse-gamma prior needs positive shape and scale")
        if self.pooled_obs_var and (np.ptp(a0) > 0 or np.ptp(b0) > 0):
            raise NonConjugateConfig("a pooled variance needs one shared inverse-gamma prior")
        mean = np.zeros(p) if self.gamma_mean is None else np.asarray(self.gamma_mean, dtype=float).reshape(-1)
        prec = np.eye(p) if self.gamma_precision is None else np.atleast_2d(np.asarray(self.gamma_precision, dtype=float))
        if mean.shape != (p,) or (p and prec.shape != (p, p)):
            raise NonConjugateConfig(f"gamma prior dimensions do not match {p} regressors")
        if p:
            try:
                np.linalg.cholesky(prec)
            except np.linalg.LinAlgError:
                raise NonConjugateConfig("gamma prior precision must be positive definite") from None
        learn_gamma = (p > 0) if self.learn_gamma is None else bool(self.learn_gamma)
        if learn_gamma and p == 0:
            raise NonConjugateConfig("cannot learn gamma without regressors")
        return LearningPriors(a0, b0, mean, prec.reshape(p, p), self.learn_obs_var, learn_gamma,
                              self.pooled_obs_var)

    @property
    def enabled(self) -> bool:
        return bool(self.learn_obs_var or self.learn_gamma)


@dataclass
class ParamDraw:
    obs_var: np.ndarray   # (..., 3)
    gamma: np.ndarray     # (..., p)

    def take(self, idx) -> "ParamDraw":
        return ParamDraw(self.obs_var[idx], self.gamma[idx])


def update_suffstats(ps: ParamSuffStats, x_draw, regime, y, z, spec: ModelSpec, gamma=None) -> ParamSuffStats:
    """Fold one realised ``(x, y, z)`` triple into the statistics.

    ``regime`` may be a single regime or an array of codes matching the leading
    axis of ``ps``; ``gamma`` defaults to ``spec.gamma`` and may be per particle.
    """
    p = spec.n_regressors
    z = np.atleast_1d(np.asarray(z if z is not None else (), dtype=float)).reshape(-1)
    if z.shape[0] != p:
        raise DimensionMismatch(f"regressor vector has length {z.shape[0]}, expected {p}")
    gamma = spec.gamma if gamma is None else np.asarray(gamma, dtype=float)
    x = np.asarray(x_draw, dtype=float)
    r = np.asarray(regime).astype(int) + 1
    signal = y - x @ spec.h_row
    resid = signal - gamma @ z if p else signal

    n, ss, Lam, b = ps.n.copy(), ps.ss.copy(), ps.Lam.copy(), ps.b.copy()
    if n.ndim == 1:
        n[r] += 1.0
        ss[r] += resid * resid
        if p:
            Lam[r] += np.outer(z, z)
            b[r] += z * signal
    else:
        rows = np.arange(n.shape[0])
        n[rows, r] += 1.0
        ss[rows, r] += resid * resid
        if p:
            Lam[rows, r] += np.outer(z, z)
            b[rows, r] += signal[:, None] * z
    return ParamSuffStats(n, ss, Lam, b)


def obs_var_posterior(ps: ParamSuffStats, priors: LearningPriors):
    """Inverse-gamma shape and scale per regime (identical columns when pooled)."""
    if priors.pooled_obs_var:
        n = np.sum(ps.n, axis=-1, keepdims=True)
        ss = np.sum(ps.ss, axis=-1, keepdims=True)
        shape = priors.a0 + 0.5 * n
        return shape, np.broadcast_to(priors.b0 + 0.5 * ss, shape.shape)
    return priors.a0 + 0.5 * ps.n, priors.b0 + 0.5 * ps.ss


def gamma_posterior(ps: ParamSuffStats, obs_var, priors: LearningPriors):
    """Gaussian precision and mean of gamma given the statistics and V."""
    inv_v = 1.0 / np.asarray(obs_var)[..., :, None, None]
    prec = priors.gamma_precision + np.sum(ps.Lam * inv_v, axis=-3)
    rhs = priors.gamma_precision @ priors.gamma_mean + np.sum(ps.b * inv_v[..., 0], axis=-2)
    mean = np.linalg.solve(prec, rhs[..., None])[..., 0]
    return prec, mean


def draw_parameters(ps: ParamSuffStats, priors: LearningPriors, rng: np.random.Generator,
                    spec: ModelSpec | None = None) -> ParamDraw:
    """Draw ``(V, gamma)`` from their conditional posteriors.

    V is drawn first; gamma is then drawn given that V.  Parameters that are
    not being learned are copied from ``spec``.
    """
    shape = ps.n.shape[:-1]
    p = ps.b.shape[-1]
    if spec is not None:
        priors = priors.resolved(spec)
    elif priors.gamma_mean is None:
        raise NonConjugateConfig("priors must be resolved against a model spec")
    if priors.learn_obs_var:
        shape_post, scale_post = obs_var_posterior(ps, priors)
        if priors.pooled_obs_var:
            g = rng.standard_gamma(shape_post[..., :1])
        else:
            g = rng.standard_gamma(shape_post)
        obs_var = np.broadcast_to(scale_post / g, shape + (3,)).copy()
    else:
        if spec is None:
            raise NonConjugateConfig("fixed observation variances need the model spec")
        obs_var = np.broadcast_to(spec.obs_var, shape + (3,)).copy()
    if priors.learn_gamma:
        prec, mean = gamma_posterior(ps, obs_var, priors)
        L = np.linalg.cholesky(prec)
        eps = rng.standard_normal(shape + (p,))
        # x = mean + L^{-T} eps has covariance prec^{-1}.
        gamma = mean + np.linalg.solve(np.swapaxes(L, -1, -2), eps[..., None])[..., 0]
    else:
        gamma = np.broadcast_to(spec.gamma if spec is not None else np.zeros(p), shape + (p,)).copy()
    return ParamDraw(obs_var, gamma)


def obs_var_moments(ps: ParamSuffStats, priors: LearningPriors):
    """Posterior mean and variance of each V_r; NaN where they do not exist."""
    a, b = obs_var_posterior(ps, priors)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean = np.where(a > 1, b / (a - 1), np.nan)
        var = np.where(a > 2, b * b / ((a - 1) ** 2 * (a - 2)), np.nan)
    return mean, var


def mixture_moments(weights: np.ndarray, means: np.ndarray, variances: np.ndarray):
    """Mean and standard deviation of a weighted mixture, per trailing column."""
    w = weights[:, None] if means.ndim == 2 else weights
    mean = np.sum(w * means, axis=0)
    second = np.sum(w * (variances + means * means), axis=0)
    return mean, np.sqrt(np.maximum(second - mean * mean, 0.0))


__all__ = [
    "NonConjugateConfig",
    "ParamSuffStats",
    "LearningPriors",
    "ParamDraw",
    "update_suffstats",
    "draw_parameters",
    "obs_var_posterior",
    "gamma_posterior",
    "obs_var_moments",
    "mixture_moments",
]
