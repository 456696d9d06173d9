"""Switching dynamic linear model for traffic flow speed.

State ``x = (theta, beta)`` holds speed (mi/h) and its rate of change per
observation interval.  The regime ``alpha`` selects the evolution gain::

    G = [[F, alpha],      F = 1   if alpha in {-1, +1}
         [0, 1    ]]      F = f0  if alpha == 0

and the evolution mean is ``G x + (I - G) mu`` with ``mu = (v_free, 0)``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Regime",
    "REGIMES",
    "ModelSpec",
    "InvalidSpec",
    "NonPositiveDefinite",
    "DimensionMismatch",
    "build_gain",
    "evolution_mean",
    "gaussian_logdensity",
    "default_spec",
    "DEFAULT_TRANSITION",
]

_LOG_2PI = math.log(2.0 * math.pi)


class InvalidSpec(ValueError):
    pass


class NonPositiveDefinite(np.linalg.LinAlgError):
    pass


class DimensionMismatch(ValueError):
    pass


class Regime(enum.IntEnum):
    BREAKDOWN = -1
    FREE_FLOW = 0
    RECOVERY = 1

    @property
    def index(self) -> int:
        """Position in the (breakdown, free flow, recovery) ordering."""
        return int(self) + 1

    @classmethod
    def from_index(cls, i: int) -> "Regime":
        return cls(int(i) - 1)

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "")


REGIMES = (Regime.BREAKDOWN, Regime.FREE_FLOW, Regime.RECOVERY)
REGIME_CODES = np.array([-1, 0, 1])

DEFAULT_TRANSITION = np.array(
    [
        [0.6, 0.3, 0.1],
        [0.15, 0.7, 0.15],
        [0.3, 0.1, 0.6],
    ]
)


def _as_regime_map(value, shape) -> np.ndarray:
    """Stack a per-regime parameter into an array indexed by ``Regime.index``."""
    if isinstance(value, dict):
        rows = [np.asarray(value[r], dtype=float) for r in REGIMES]
        return np.stack(rows)
    arr = np.asarray(value, dtype=float)
    if arr.shape == shape:
        return np.broadcast_to(arr, (3,) + shape).copy()
    if arr.shape == (3,) + shape:
        return arr.copy()
    raise InvalidSpec(f"per-regime parameter has shape {arr.shape}, expected {shape} or {(3,) + shape}")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Static parameters of the switching DLM.

    ``obs_var`` and ``evo_cov`` accept either one value shared by all regimes
    or a ``{Regime: value}`` mapping; both are stored as arrays indexed by
    ``Regime.index`` (breakdown, free flow, recovery).
    """

    h_row: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    f0: float = 0.5
    v_free: float = 63.0
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obs_var: np.ndarray = 4.0
    evo_cov: np.ndarray = field(default_factory=lambda: np.array([[1.9, 0.0], [0.0, 4.5]]))
    prior_mean: np.ndarray = field(default_factory=lambda: np.array([63.0, 0.0]))
    prior_cov: np.ndarray = field(default_factory=lambda: np.diag([25.0, 1.0]))
    prior_regime_probs: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3.0))

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "h_row", np.asarray(self.h_row, dtype=float).reshape(2))
        set_(self, "f0", float(self.f0))
        set_(self, "v_free", float(self.v_free))
        set_(self, "gamma", np.atleast_1d(np.asarray(self.gamma, dtype=float)).reshape(-1))
        set_(self, "obs_var", _as_regime_map(self.obs_var, ()))
        set_(self, "evo_cov", _as_regime_map(self.evo_cov, (2, 2)))
        set_(self, "prior_mean", np.asarray(self.prior_mean, dtype=float).reshape(2))
        set_(self, "prior_cov", np.asarray(self.prior_cov, dtype=float).reshape(2, 2))
        set_(self, "prior_regime_probs", np.asarray(self.prior_regime_probs, dtype=float).reshape(3))
        for name in ("h_row", "gamma", "obs_var", "evo_cov", "prior_mean", "prior_cov", "prior_regime_probs"):
            getattr(self, name).setflags(write=False)
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.f0 < 1.0:
            raise InvalidSpec(f"f0 must lie in (0, 1), got {self.f0}")
        if not self.v_free > 0.0:
            raise InvalidSpec(f"v_free must be positive, got {self.v_free}")
        if np.any(~(self.obs_var > 0.0)):
            raise InvalidSpec(f"observation variances must be positive, got {self.obs_var}")
        for r, w in zip(REGIMES, self.evo_cov):
            _check_psd(w, f"evo_cov[{r.name}]")
        _check_psd(self.prior_cov, "prior_cov")
        p = self.prior_regime_probs
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidSpec(f"prior_regime_probs must be a distribution, got {p}")
        if not np.all(np.isfinite(self.h_row)) or not np.all(np.isfinite(self.prior_mean)):
            raise InvalidSpec("non-finite entries in h_row or prior_mean")

    @property
    def mu(self) -> np.ndarray:
        return np.array([self.v_free, 0.0])

    @property
    def n_regressors(self) -> int:
        return self.gamma.shape[0]

    def replace(self, **changes) -> "ModelSpec":
        fields = dict(
            h_row=self.h_row,
            f0=self.f0,
            v_free=self.v_free,
            gamma=self.gamma,
            obs_var=self.obs_var,
            evo_cov=self.evo_cov,
            prior_mean=self.prior_mean,
            prior_cov=self.prior_cov,
            prior_regime_probs=self.prior_regime_probs,
        )
        fields.update(changes)
        return ModelSpec(**fields)

    def regressor_offset(self, z) -> float:
        """gamma^T z, with a length check."""
        z = np.atleast_1d(np.asarray(z if z is not None else (), dtype=float)).reshape(-1)
        if z.shape[0] != self.gamma.shape[0]:
            raise DimensionMismatch(f"regressor vector has length {z.shape[0]}, gamma has {self.gamma.shape[0]}")
        return float(self.gamma @ z) if z.size else 0.0


def _check_psd(mat: np.ndarray, name: str) -> None:
    if mat.shape != (2, 2) or not np.all(np.isfinite(mat)):
        raise InvalidSpec(f"{name} must be a finite 2x2 matrix")
    if abs(mat[0, 1] - mat[1, 0]) > 1e-12 * max(1.0, np.abs(mat).max()):
        raise InvalidSpec(f"{name} is not symmetric")
    if np.linalg.eigvalsh(mat).min() < -1e-10:
        raise InvalidSpec(f"{name} is not positive semidefinite")


def default_spec(**overrides) -> ModelSpec:
    """Parameters of the I-55 experiment: H = (1 0), V = 4, F0 = 0.5,
    W = diag(1.9, 4.5), v_f = 63 mi/h and a uniform initial regime."""
    return ModelSpec().replace(**overrides) if overrides else ModelSpec()


def gain_arrays(codes, f0: float) -> np.ndarray:
    """Gain matrices for an array of regime codes, shape ``codes.shape + (2, 2)``."""
    codes = np.asarray(codes)
    G = np.zeros(codes.shape + (2, 2))
    G[..., 0, 0] = np.where(codes == 0, f0, 1.0)
    G[..., 0, 1] = codes
    G[..., 1, 1] = 1.0
    return G


def build_gain(regime: Regime, spec: ModelSpec) -> np.ndarray:
    return gain_arrays(int(Regime(regime)), spec.f0)


def evolution_mean(x, regime: Regime, spec: ModelSpec) -> np.ndarray:
    G = build_gain(regime, spec)
    mu = spec.mu
    return G @ np.asarray(x, dtype=float) + (np.eye(2) - G) @ mu


def gaussian_logdensity(x, mean, cov) -> float:
    """Log of the multivariate normal density.

    Factorizes ``cov`` directly and only falls back to a diagonal jitter of
    ``1e-9 * trace / k`` when the plain Cholesky factorization fails.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    k = x.shape[0]
    if mean.shape != (k,) or cov.shape != (k, k):
        raise DimensionMismatch(f"shapes x={x.shape}, mean={mean.shape}, cov={cov.shape}")
    L = _cholesky(cov)
    sol = np.linalg.solve(L, x - mean)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return float(-0.5 * (k * _LOG_2PI + logdet + sol @ sol))


def _cholesky(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    k = cov.shape[0]
    jitter = 1e-9 * np.trace(cov) / k
    try:
        if not jitter > 0:
            raise np.linalg.LinAlgError
        return np.linalg.cholesky(cov + jitter * np.eye(k))
    except np.linalg.LinAlgError:
        raise NonPositiveDefinite(f"covariance is not positive definite:\n{cov}") from None


def sqrt_psd_2x2(C: np.ndarray) -> np.ndarray:
    """Lower-triangular factor ``L`` with ``L L^T = C`` for stacked 2x2 PSD
    matrices; tolerates exactly singular inputs (zero rows give zero columns)."""
    C = np.asarray(C, dtype=float)
    L = np.zeros_like(C)
    l00 = np.sqrt(np.maximum(C[..., 0, 0], 0.0))
    safe = np.where(l00 > 0, l00, 1.0)
    l10 = np.where(l00 > 0, C[..., 1, 0] / safe, 0.0)
    L[..., 0, 0] = l00
    L[..., 1, 0] = l10
    L[..., 1, 1] = np.sqrt(np.maximum(C[..., 1, 1] - l10 * l10, 0.0))
    return L
