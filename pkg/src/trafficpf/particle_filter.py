"""Rao-Blackwellized resample/propagate filter for the switching DLM.

Each particle carries a regime and the Kalman moments ``(m, C)`` of the
speed state given its regime path; the state itself is never sampled while
filtering.  One step with observation ``y``:

1. resample ancestors with weights ``w_i * p(y | alpha_i, s_i)`` where the
   predictive is the 3-component mixture over the next regime;
2. draw the next regime, either from its conditional posterior given ``y``
   (``mode="adapted"``, the default) or from the kernel alone
   (``mode="prior"``, which then reweights by the achieved likelihood);
3. run the Kalman update under the drawn regime.

Random numbers come from one generator per step, seeded with
``SeedSequence(seed, spawn_key=(t,))``.  Within a step the draws are taken
in a fixed order (resampling uniforms, regime uniforms, then learning
draws) and particle ``i`` consumes element ``i`` of each block, so a run is
reproducible for a given seed and particle count regardless of threads.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .kalman import KalmanStats, normal_logpdf, predict_arrays, update_arrays
from .learning import (
    LearningPriors,
    ParamDraw,
    ParamSuffStats,
    draw_parameters,
    gamma_posterior,
    mixture_moments,
    obs_var_moments,
    update_suffstats,
)
from .model import REGIME_CODES, InvalidSpec, ModelSpec, Regime, sqrt_psd_2x2
from .regime_kernel import ExogenousFeatures, RegimeKernel, categorical_from_uniform

MODES = ("adapted", "prior")
RESAMPLERS = ("multinomial", "systematic")
QUANTILE_LEVELS = (0.05, 0.5, 0.95)


class AllWeightsZero(FloatingPointError):
    def __init__(self, y, t):
        super().__init__(f"every predictive likelihood underflowed at step {t} (y = {y})")
        self.y = y
        self.t = t


@dataclass
class Particle:
    regime: Regime
    stats: KalmanStats
    weight: float
    param_stats: ParamSuffStats | None = None


@dataclass
class PosteriorSummary:
    t: int
    mean_speed: float
    mean_rate: float
    speed_quantiles: tuple
    regime_probs: np.ndarray
    ess: float
    params: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        row = {
            "t": self.t,
            "mean_speed": self.mean_speed,
            "q05": self.speed_quantiles[0],
            "q50": self.speed_quantiles[1],
            "q95": self.speed_quantiles[2],
            "p_breakdown": self.regime_probs[0],
            "p_freeflow": self.regime_probs[1],
            "p_recovery": self.regime_probs[2],
            "mean_rate": self.mean_rate,
            "ess": self.ess,
        }
        row.update(self.params)
        return row


@dataclass
class FilterState:
    """Particle system at step ``t``, stored as parallel arrays.

    ``regimes`` holds regime codes (-1, 0, 1); ``m`` is ``(N, 2)``, ``C`` is
    ``(N, 2, 2)``.  When learning, ``param_stats`` and ``params`` hold each
    particle's sufficient statistics and current parameter draw.
    """

    spec: ModelSpec
    kernel: RegimeKernel
    seed: int
    t: int
    regimes: np.ndarray
    m: np.ndarray
    C: np.ndarray
    weights: np.ndarray
    log_marginal_lik: float = 0.0
    mode: str = "adapted"
    resampling: str = "multinomial"
    threads: int = 1
    priors: LearningPriors | None = None
    param_stats: ParamSuffStats | None = None
    params: ParamDraw | None = None

    @property
    def n_particles(self) -> int:
        return self.regimes.shape[0]

    @property
    def learning(self) -> bool:
        return self.priors is not None

    @property
    def particles(self) -> list[Particle]:
        out = []
        for i in range(self.n_particles):
            ps = self.param_stats.take(i) if self.param_stats is not None else None
            out.append(Particle(Regime(int(self.regimes[i])), KalmanStats(self.m[i], self.C[i]),
                                float(self.weights[i]), ps))
        return out


def step_rng(seed: int, t: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(t,))))


def init(spec: ModelSpec, kernel: RegimeKernel, N: int, seed: int, mode: str = "adapted",
         resampling: str = "multinomial", threads: int = 1,
         priors: LearningPriors | None = None) -> FilterState:
    """N equally weighted particles at the prior.

    Passing ``priors`` switches on parameter learning; initial parameter
    draws then come from those priors.
    """
    if N < 1:
        raise InvalidSpec("need at least one particle")
    if mode not in MODES:
        raise InvalidSpec(f"mode must be one of {MODES}")
    if resampling not in RESAMPLERS:
        raise InvalidSpec(f"resampling must be one of {RESAMPLERS}")
    if threads < 1:
        raise InvalidSpec("threads must be positive")
    spec.validate()
    rng = step_rng(seed, 0)
    idx = categorical_from_uniform(np.broadcast_to(spec.prior_regime_probs, (N, 3)), rng.random(N))
    state = FilterState(
        spec=spec,
        kernel=kernel,
        seed=int(seed),
        t=0,
        regimes=REGIME_CODES[idx],
        m=np.broadcast_to(spec.prior_mean, (N, 2)).copy(),
        C=np.broadcast_to(spec.prior_cov, (N, 2, 2)).copy(),
        weights=np.full(N, 1.0 / N),
        mode=mode,
        resampling=resampling,
        threads=int(threads),
    )
    if priors is not None:
        priors = priors.resolved(spec)
        stats = ParamSuffStats.empty(spec.n_regressors, (N,))
        state.priors = priors
        state.param_stats = stats
        state.params = draw_parameters(stats, priors, rng, spec)
    return state


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def _resample(probs: np.ndarray, u: np.ndarray, scheme: str) -> np.ndarray:
    N = probs.shape[0]
    if scheme == "systematic":
        u = (u[0] + np.arange(N)) / N
    cdf = np.cumsum(probs)
    k = np.searchsorted(cdf, u * cdf[-1], side="right")
    last_positive = N - 1 - int(np.argmax(probs[::-1] > 0))
    return np.minimum(k, last_positive)


_EXECUTORS: dict[int, ThreadPoolExecutor] = {}


def _executor(threads: int) -> ThreadPoolExecutor:
    if threads not in _EXECUTORS:
        _EXECUTORS[threads] = ThreadPoolExecutor(max_workers=threads)
    return _EXECUTORS[threads]


def _predict_all(state: FilterState, offset, obs_var):
    """Predictions for every (particle, next regime) pair, shape ``(N, 3, ...)``."""
    codes = REGIME_CODES[None, :]

    def run(sl):
        ov = None if obs_var is None else obs_var[sl]
        off = offset[sl, None] if np.ndim(offset) == 1 else offset
        return predict_arrays(state.m[sl, None, :], state.C[sl, None, :, :], codes, state.spec, ov, off)

    N = state.n_particles
    if state.threads == 1 or N < 2 * state.threads:
        return run(slice(None))
    bounds = np.linspace(0, N, state.threads + 1).astype(int)
    parts = list(_executor(state.threads).map(run, [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]))
    return tuple(np.concatenate(arrs, axis=0) for arrs in zip(*parts))


def _particle_params(state: FilterState, z: np.ndarray):
    """Per-particle observation variances (N, 3) and regression offsets."""
    if state.params is None:
        return None, state.spec.regressor_offset(z)
    offset = state.params.gamma @ z if z.size else 0.0
    return state.params.obs_var, offset


def _check_z(z, spec: ModelSpec) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z if z is not None else (), dtype=float)).reshape(-1)
    spec.regressor_offset(z)
    return z


def _advance(state: FilterState, y, z, Z) -> FilterState:
    spec = state.spec
    N = state.n_particles
    t_next = state.t + 1
    z = _check_z(z, spec)
    rng = step_rng(state.seed, t_next)
    u_resample = rng.random(N)
    u_regime = rng.random(N)

    P = np.asarray(state.kernel.matrix(Z), dtype=float)
    rows = state.regimes + 1
    obs_var, offset = _particle_params(state, z)

    if y is None or not np.isfinite(y):
        # Missing report: propagate regimes and moments without an update.
        a_idx = categorical_from_uniform(P[rows], u_regime)
        codes = REGIME_CODES[a_idx]
        mf, Cf, _, _ = predict_arrays(state.m, state.C, codes, spec)
        return replace(state, t=t_next, regimes=codes, m=mf, C=Cf)

    mf, Cf, y_mean, y_var = _predict_all(state, offset, obs_var)
    ll = normal_logpdf(y, y_mean, y_var)
    with np.errstate(divide="ignore"):
        log_trans = np.log(P)[rows]
        log_w = np.log(state.weights)
    comp = log_trans + ll
    lp = logsumexp(comp, axis=1)
    log_target = log_w + lp
    if not np.any(np.isfinite(log_target)):
        raise AllWeightsZero(y, t_next)
    increment = float(logsumexp(log_target))
    probs = np.exp(log_target - log_target.max())
    probs /= probs.sum()
    k = _resample(probs, u_resample, state.resampling)

    if state.mode == "adapted":
        post = np.exp(comp[k] - lp[k, None])
        a_idx = categorical_from_uniform(post, u_regime)
        weights = np.full(N, 1.0 / N)
    else:
        a_idx = categorical_from_uniform(P[rows[k]], u_regime)
        log_w_new = ll[k, a_idx] - lp[k]
        weights = np.exp(log_w_new - log_w_new.max())
        weights /= weights.sum()

    sel_var = spec.obs_var[a_idx] if obs_var is None else obs_var[k, a_idx]
    m_new, C_new = update_arrays(mf[k, a_idx], Cf[k, a_idx], y_mean[k, a_idx], y_var[k, a_idx],
                                 y, spec.h_row, sel_var)
    new = replace(state, t=t_next, regimes=REGIME_CODES[a_idx], m=m_new, C=C_new, weights=weights,
                  log_marginal_lik=state.log_marginal_lik + increment)

    if state.learning:
        params = state.params.take(k)
        L = sqrt_psd_2x2(C_new)
        x_draw = m_new + (L @ rng.standard_normal((N, 2))[..., None])[..., 0]
        stats = update_suffstats(state.param_stats.take(k), x_draw, new.regimes, y, z, spec, params.gamma)
        new.param_stats = stats
        new.params = draw_parameters(stats, state.priors, rng, spec)
    return new


def summarize(state: FilterState) -> PosteriorSummary:
    w = state.weights
    regime_probs = np.bincount(state.regimes + 1, weights=w, minlength=3)
    regime_probs = regime_probs / regime_probs.sum()
    mean_speed = float(w @ state.m[:, 0])
    mean_rate = float(w @ state.m[:, 1])
    sd = np.sqrt(np.maximum(state.C[:, 0, 0], 0.0))
    q = mixture_quantiles(w, state.m[:, 0], sd, QUANTILE_LEVELS)
    params = _param_summary(state) if state.learning else {}
    return PosteriorSummary(state.t, mean_speed, mean_rate, tuple(float(v) for v in q), regime_probs,
                            effective_sample_size(w), params)


def _param_summary(state: FilterState) -> dict:
    out = {}
    w = state.weights
    priors = state.priors
    if priors.learn_obs_var:
        means, variances = obs_var_moments(state.param_stats, priors)
        mean, sd = mixture_moments(w, means, variances)
        if priors.pooled_obs_var:
            out["v"] = float(mean[0])
            out["v_sd"] = float(sd[0])
        else:
            for r, mu, s in zip(("breakdown", "freeflow", "recovery"), mean, sd):
                out[f"v_{r}"] = float(mu)
                out[f"v_{r}_sd"] = float(s)
    if priors.learn_gamma:
        _, gmean = gamma_posterior(state.param_stats, state.params.obs_var, priors)
        for j, g in enumerate(w @ gmean):
            out[f"gamma_{j}"] = float(g)
    return out


def step(state: FilterState, y: float, z=None, Z: ExogenousFeatures | None = None):
    """Assimilate one observation; returns the new state and its summary."""
    new = _advance(state, y, z, Z)
    return new, summarize(new)


def learning_step(state: FilterState, y: float, z=None, Z: ExogenousFeatures | None = None) -> FilterState:
    """Resample, propagate, update sufficient statistics and redraw parameters.

    Without learning priors on ``state`` this is exactly ``step``.
    """
    return _advance(state, y, z, Z)


def mixture_quantiles(weights, means, sds, levels, tol: float = 1e-9, max_iter: int = 200) -> np.ndarray:
    """Quantiles of a univariate Gaussian mixture.

    Each level is bracketed and solved by bisection, accelerated with Newton
    steps that are only accepted when they stay inside the current bracket
    and shrink the step.
    Zero-variance components are treated as point masses; components with
    identical moments are merged first.
    """
    w, mu, s = _merge_components(np.asarray(weights, dtype=float), np.asarray(means, dtype=float),
                                 np.asarray(sds, dtype=float))
    levels = np.asarray(levels, dtype=float)
    point = s <= 0
    s_safe = np.where(point, 1.0, s)
    norm = 1.0 / (np.sqrt(2.0 * np.pi) * s_safe)

    def cdf_pdf(x):
        zz = (x[None, :] - mu[:, None]) / s_safe[:, None]
        c = ndtr(zz)
        d = np.exp(-0.5 * zz * zz) * norm[:, None]
        if point.any():
            c[point] = x[None, :] >= mu[point, None]
            d[point] = 0.0
        return w @ c, w @ d

    lo = np.full(levels.shape, float(np.min(mu - 10 * s)) - 1.0)
    hi = np.full(levels.shape, float(np.max(mu + 10 * s)) + 1.0)
    # Start from the weighted quantiles of the component means (already sorted).
    cw = np.cumsum(w)
    x = mu[np.minimum(np.searchsorted(cw, levels * cw[-1]), mu.shape[0] - 1)]
    dx_old = hi - lo
    for _ in range(max_iter):
        F, f = cdf_pdf(x)
        below = F < levels
        lo = np.where(below, x, lo)
        hi = np.where(below, hi, x)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - (F - levels) / f
        # Newton must stay in the bracket and at least halve the previous step,
        # otherwise it can cycle on the flat shoulders of the CDF.
        ok = (np.isfinite(newton) & (newton >= lo) & (newton <= hi)
              & (2.0 * np.abs(newton - x) <= np.abs(dx_old)))
        x_new = np.where(ok, newton, 0.5 * (lo + hi))
        dx_old = x_new - x
        done = np.all((np.abs(x_new - x) < tol) | (hi - lo < tol))
        x = x_new
        if done:
            break
    return x


def _merge_components(w, mu, s):
    """Sum the weights of components whose (mean, sd) coincide exactly."""
    order = np.lexsort((s, mu))
    mu_s, s_s, w_s = mu[order], s[order], w[order]
    new = np.ones(mu_s.shape[0], dtype=bool)
    new[1:] = (mu_s[1:] != mu_s[:-1]) | (s_s[1:] != s_s[:-1])
    group = np.cumsum(new) - 1
    return np.bincount(group, weights=w_s), mu_s[new], s_s[new]


def sample_states(state: FilterState, n_draws: int, rng: np.random.Generator) -> np.ndarray:
    """Draws from the filtered state mixture, shape ``(n_draws, 2)``."""
    if n_draws < 1:
        raise ValueError("n_draws must be positive")
    cdf = np.cumsum(state.weights)
    anc = np.minimum(np.searchsorted(cdf, rng.random(n_draws) * cdf[-1], side="right"), state.n_particles - 1)
    L = sqrt_psd_2x2(state.C[anc])
    eps = rng.standard_normal((n_draws, 2))
    return state.m[anc] + (L @ eps[..., None])[..., 0]


@dataclass
class FilterRun:
    summaries: list
    state: FilterState


def run_filter(spec: ModelSpec, kernel: RegimeKernel, ys: Sequence[float], N: int, seed: int,
               features: Sequence[ExogenousFeatures] | None = None, regressors=None,
               mode: str = "adapted", resampling: str = "multinomial", threads: int = 1,
               priors: LearningPriors | None = None) -> FilterRun:
    """Filter a whole series.

    ``features[t]`` is the conditioning information available before
    observation ``t``; its recent speeds are replaced by the last three
    filtered mean speeds (most recent first) so the kernel only sees
    quantities from earlier steps.
    """
    state = init(spec, kernel, N, seed, mode, resampling, threads, priors)
    summaries = []
    recent: list[float] = []
    T = len(ys)
    for t in range(T):
        Z = None
        if features is not None:
            Z = features[t].with_speeds(recent[:3]) if recent else features[t]
            if kernel.needs_recent_speeds and not Z.recent_speeds:
                Z = Z.with_speeds([float(spec.prior_mean[0])])
        z = None if regressors is None else regressors[t]
        state, summary = step(state, ys[t], z, Z)
        summaries.append(summary)
        recent.insert(0, summary.mean_speed)
    return FilterRun(summaries, state)
