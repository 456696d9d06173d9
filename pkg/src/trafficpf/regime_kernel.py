"""Switching kernels p(alpha_{t+1} | alpha_t, Z_t).

Three variants share one interface (``transition_probs`` / ``matrix``):

* ``FixedKernel``  - a single 3x3 Markov matrix, ``Z`` is ignored;
* ``LookupKernel`` - one matrix per (period of day, day of week);
* ``KnnKernel``    - empirical next-regime frequencies of the k historic
  records nearest to ``(alpha_t, recent speeds, time of day)``.

Rows and columns are ordered (breakdown, free flow, recovery).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Iterable, Sequence

import numpy as np

from .model import REGIMES, Regime

MINUTES_PER_DAY = 1440

# Period boundaries in minutes since midnight, [start, end).
MORNING_PEAK = (6 * 60, 10 * 60)
EVENING_PEAK = (15 * 60, 19 * 60)


class MissingFeatures(ValueError):
    pass


class EmptyHistory(ValueError):
    pass


class InsufficientHistory(ValueError):
    pass


class Period(enum.Enum):
    MORNING_PEAK = "morning_peak"
    EVENING_PEAK = "evening_peak"
    OFF_PEAK = "off_peak"

    @classmethod
    def of(cls, minutes: float) -> "Period":
        if MORNING_PEAK[0] <= minutes < MORNING_PEAK[1]:
            return cls.MORNING_PEAK
        if EVENING_PEAK[0] <= minutes < EVENING_PEAK[1]:
            return cls.EVENING_PEAK
        return cls.OFF_PEAK


DAY_NAMES = ("mon", "tue", "wed", "thu", "fri", "sat", "sun")


@dataclass(frozen=True)
class ExogenousFeatures:
    """Conditioning variables ``Z_t`` for the switching kernel.

    ``recent_speeds`` are ordered most recent first and hold at most three
    filtered speeds.  The event flags are carried for callers but no built-in
    kernel reads them.
    """

    time_of_day: float = 0.0
    day_of_week: int = 0
    recent_speeds: tuple = ()
    event: bool = False
    accident: bool = False
    weather: bool = False

    def __post_init__(self):
        if not 0.0 <= self.time_of_day < MINUTES_PER_DAY:
            raise ValueError(f"time_of_day must be in [0, 1440), got {self.time_of_day}")
        if not 0 <= int(self.day_of_week) < 7:
            raise ValueError(f"day_of_week must be in 0..6, got {self.day_of_week}")
        speeds = tuple(float(s) for s in self.recent_speeds)
        if len(speeds) > 3:
            raise ValueError("at most three recent speeds are used")
        object.__setattr__(self, "recent_speeds", speeds)
        object.__setattr__(self, "day_of_week", int(self.day_of_week))

    @property
    def period(self) -> Period:
        return Period.of(self.time_of_day)

    @classmethod
    def from_timestamp(cls, timestamp: float, recent_speeds: Sequence[float] = (), **flags) -> "ExogenousFeatures":
        """Build features from epoch seconds, interpreted in UTC."""
        dt = datetime.fromtimestamp(float(timestamp), tz=timezone.utc)
        minutes = dt.hour * 60 + dt.minute + dt.second / 60.0
        return cls(minutes, dt.weekday(), tuple(recent_speeds), **flags)

    def with_speeds(self, recent_speeds: Sequence[float]) -> "ExogenousFeatures":
        return ExogenousFeatures(
            self.time_of_day, self.day_of_week, tuple(recent_speeds), self.event, self.accident, self.weather
        )


def validate_transition_matrix(P, tol: float = 1e-12) -> np.ndarray:
    P = np.array(P, dtype=float)
    if P.shape != (3, 3):
        raise ValueError(f"transition matrix must be 3x3, got {P.shape}")
    if np.any(P < 0.0) or np.any(P > 1.0) or not np.all(np.isfinite(P)):
        raise ValueError("transition matrix entries must lie in [0, 1]")
    if np.any(np.abs(P.sum(axis=1) - 1.0) > tol):
        raise ValueError(f"transition matrix rows must sum to 1, got {P.sum(axis=1)}")
    P.setflags(write=False)
    return P


class RegimeKernel:
    """Common interface; subclasses implement ``transition_probs``."""

    kind = "abstract"

    def transition_probs(self, alpha: Regime, Z: ExogenousFeatures | None = None) -> np.ndarray:
        raise NotImplementedError

    def matrix(self, Z: ExogenousFeatures | None = None) -> np.ndarray:
        """All three rows for the given features, stacked as a 3x3 matrix."""
        return np.stack([self.transition_probs(a, Z) for a in REGIMES])

    @property
    def needs_recent_speeds(self) -> bool:
        return False


class FixedKernel(RegimeKernel):
    kind = "fixed"

    def __init__(self, P):
        self.P = validate_transition_matrix(P)

    def transition_probs(self, alpha, Z=None):
        return self.P[Regime(alpha).index].copy()

    def matrix(self, Z=None):
        return self.P

    def __repr__(self):
        return f"FixedKernel({self.P.tolist()})"


class LookupKernel(RegimeKernel):
    """Per-(period, day of week) matrices; unseen keys fall back to ``default``."""

    kind = "lookup"

    def __init__(self, table: dict, default):
        self.table = {(Period(p), int(d)): validate_transition_matrix(P) for (p, d), P in table.items()}
        self.default = validate_transition_matrix(default)

    def matrix(self, Z=None):
        if Z is None:
            return self.default
        return self.table.get((Z.period, Z.day_of_week), self.default)

    def transition_probs(self, alpha, Z=None):
        return self.matrix(Z)[Regime(alpha).index].copy()


@dataclass(frozen=True)
class KnnRecord:
    """One historic transition: regime and features at t, regime at t+1."""

    regime: Regime
    features: ExogenousFeatures
    next_regime: Regime


@dataclass
class KnnConfig:
    """Feature scaling for the nearest-neighbour distance.

    Speeds are divided by ``v_free``; time of day is placed on the unit
    circle so 23:55 and 00:05 are neighbours.  A mismatch in current regime
    adds ``regime_weight`` to the distance.
    """

    k: int = 25
    v_free: float = 63.0
    speed_weight: float = 1.0
    time_weight: float = 1.0
    regime_weight: float = 10.0
    weighting: str = "inverse"  # or "proportional" (literal distance weights)

    def __post_init__(self):
        if self.weighting not in ("inverse", "proportional"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.k < 1:
            raise ValueError("k must be at least 1")


def _time_point(minutes: float) -> tuple[float, float]:
    angle = 2.0 * math.pi * minutes / MINUTES_PER_DAY
    return math.cos(angle), math.sin(angle)


class _KnnIndex:
    """Feature matrix for a fixed history, built once per kernel."""

    def __init__(self, history: Sequence[KnnRecord], cfg: KnnConfig):
        self.cfg = cfg
        n = len(history)
        self.regime_idx = np.array([r.regime.index for r in history], dtype=int)
        self.next_idx = np.array([r.next_regime.index for r in history], dtype=int)
        self.speeds = np.full((n, 3), np.nan)
        for i, r in enumerate(history):
            s = r.features.recent_speeds
            self.speeds[i, : len(s)] = s
        self.speeds /= cfg.v_free
        self.time = np.array([_time_point(r.features.time_of_day) for r in history]).reshape(n, 2)

    def distances(self, alpha: Regime, Z: ExogenousFeatures) -> np.ndarray:
        cfg = self.cfg
        q = np.asarray(Z.recent_speeds, dtype=float) / cfg.v_free
        d2 = np.zeros(self.regime_idx.shape[0])
        if q.size:
            diff = self.speeds[:, : q.size] - q
            # Records with fewer stored speeds than the query compare on what they have.
            d2 += cfg.speed_weight**2 * np.nansum(diff * diff, axis=1)
        tq = np.array(_time_point(Z.time_of_day))
        dt = self.time - tq
        d2 += cfg.time_weight**2 * np.sum(dt * dt, axis=1)
        d2 += cfg.regime_weight**2 * (self.regime_idx != Regime(alpha).index)
        return np.sqrt(d2)


def _neighbour_weights(d: np.ndarray, weighting: str) -> np.ndarray:
    if weighting == "proportional":
        w = d.copy()
        return w if w.sum() > 0 else np.ones_like(d)
    positive = d > 0
    if not positive.any():
        return np.ones_like(d)
    w = np.empty_like(d)
    w[positive] = 1.0 / d[positive]
    w[~positive] = 1e3 / d[positive].min()
    return w


def knn_transition(history, k: int, Z: ExogenousFeatures, alpha: Regime, config: KnnConfig | None = None,
                   _index: _KnnIndex | None = None) -> np.ndarray:
    """Distance-weighted next-regime frequencies among the k nearest records."""
    cfg = config or KnnConfig(k=k)
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(history) < k:
        raise InsufficientHistory(f"history has {len(history)} records, k = {k}")
    index = _index or _KnnIndex(history, cfg)
    d = index.distances(alpha, Z)
    nearest = np.argsort(d, kind="stable")[:k]
    w = _neighbour_weights(d[nearest], cfg.weighting)
    probs = np.bincount(index.next_idx[nearest], weights=w, minlength=3)
    return probs / probs.sum()


class KnnKernel(RegimeKernel):
    kind = "knn"

    def __init__(self, history: Sequence[KnnRecord], config: KnnConfig | None = None):
        self.history = list(history)
        self.config = config or KnnConfig()
        if not self.history:
            raise EmptyHistory("kNN kernel needs a non-empty history")
        if len(self.history) < self.config.k:
            raise InsufficientHistory(f"history has {len(self.history)} records, k = {self.config.k}")
        self._index = _KnnIndex(self.history, self.config)

    @property
    def needs_recent_speeds(self) -> bool:
        return True

    def transition_probs(self, alpha, Z=None):
        if Z is None or not Z.recent_speeds:
            raise MissingFeatures("kNN kernel needs recent filtered speeds in Z")
        return knn_transition(self.history, self.config.k, Z, alpha, self.config, self._index)


def categorical_from_uniform(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draw of a column index per row of ``probs`` from one uniform each.

    Rounding that leaves ``u`` above the final cumulative sum maps to the last
    column with positive probability.
    """
    probs = np.asarray(probs, dtype=float)
    cdf = np.cumsum(probs, axis=-1)
    u = np.asarray(u, dtype=float) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(axis=-1)
    last_positive = probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0, axis=-1)
    return np.minimum(idx, last_positive)


def sample_next(kernel: RegimeKernel, alpha: Regime, Z, rng: np.random.Generator) -> Regime:
    probs = kernel.transition_probs(alpha, Z)
    return Regime.from_index(int(categorical_from_uniform(probs, rng.random())))


def _pairs(history) -> list[tuple[Regime, ExogenousFeatures | None]]:
    out = []
    for item in history:
        if isinstance(item, tuple):
            out.append((Regime(item[0]), item[1]))
        else:
            out.append((Regime(item), None))
    return out


def _map_rows(counts: np.ndarray, prior: np.ndarray) -> np.ndarray:
    """Dirichlet-multinomial posterior mode per row; empty rows become uniform."""
    mass = np.clip(counts + prior - 1.0, 0.0, None)
    totals = mass.sum(axis=1, keepdims=True)
    return np.where(totals > 0, mass / np.where(totals > 0, totals, 1.0), 1.0 / 3.0)


def transition_counts(regimes: Iterable) -> np.ndarray:
    idx = np.array([Regime(r).index for r in regimes], dtype=int)
    counts = np.zeros((3, 3))
    if idx.size >= 2:
        np.add.at(counts, (idx[:-1], idx[1:]), 1.0)
    return counts


def fit_map_transition(history, dirichlet_prior=None) -> np.ndarray:
    """MAP transition matrix from a labelled regime sequence.

    ``history`` holds regimes or ``(regime, features)`` pairs in time order.
    Pseudo-counts below one put the mode on the simplex boundary; those
    entries are clipped to zero.
    """
    pairs = _pairs(history)
    if len(pairs) < 2:
        raise EmptyHistory("need at least two labelled steps to count transitions")
    prior = np.ones((3, 3)) if dirichlet_prior is None else np.asarray(dirichlet_prior, dtype=float)
    counts = transition_counts([r for r, _ in pairs])
    return validate_transition_matrix(_map_rows(counts, prior))


def fit_lookup_kernel(history, dirichlet_prior=None) -> LookupKernel:
    """One MAP matrix per (period, day of week) of the origin step; the pooled
    fit serves as the fallback for unseen combinations."""
    pairs = _pairs(history)
    if any(Z is None for _, Z in pairs):
        raise MissingFeatures("lookup fitting needs features for every step")
    prior = np.ones((3, 3)) if dirichlet_prior is None else np.asarray(dirichlet_prior, dtype=float)
    pooled = fit_map_transition(pairs, prior)
    groups: dict = {}
    for (a, Z), (b, _) in zip(pairs[:-1], pairs[1:]):
        key = (Z.period, Z.day_of_week)
        groups.setdefault(key, np.zeros((3, 3)))[a.index, b.index] += 1.0
    table = {key: _map_rows(c, prior) for key, c in groups.items()}
    return LookupKernel(table, pooled)


def stationary_distribution(P) -> np.ndarray:
    """Left eigenvector of ``P`` for eigenvalue one, normalised to sum to one."""
    P = np.asarray(P, dtype=float)
    vals, vecs = np.linalg.eig(P.T)
    pi = np.real(vecs[:, np.argmin(np.abs(vals - 1.0))])
    return pi / pi.sum()


def knn_history_from_labels(regimes: Sequence, features: Sequence[ExogenousFeatures]) -> list[KnnRecord]:
    """Consecutive (regime, features) pairs turned into transition records."""
    if len(regimes) != len(features):
        raise ValueError("regimes and features must have equal length")
    return [
        KnnRecord(Regime(regimes[i]), features[i], Regime(regimes[i + 1]))
        for i in range(len(regimes) - 1)
    ]
