"""Naive relative-deviation filters used as comparison baselines.

Every filter returns an array the same length as its input; steps without a
full trailing window, or whose reference level is zero, are NaN (flagged
missing) rather than padded.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Regime


class WindowTooLong(ValueError):
    pass


@dataclass
class BaselineOutput:
    series: np.ndarray
    regimes: list

    @property
    def valid(self) -> np.ndarray:
        return ~np.isnan(self.series)


def _ratio(y: np.ndarray, ref: np.ndarray) -> np.ndarray:
    out = np.full(y.shape, np.nan)
    ok = np.isfinite(ref) & (ref != 0)
    out[ok] = (y[ok] - ref[ok]) / ref[ok]
    return out


def _check_window(y: np.ndarray, w: int) -> None:
    if w < 1:
        raise ValueError("window must be at least 1")
    if w >= y.shape[0]:
        raise WindowTooLong(f"window {w} leaves no output for a series of length {y.shape[0]}")


def _trailing_windows(y: np.ndarray, w: int) -> np.ndarray:
    """Row i holds y[i : i + w], the window preceding output index i + w."""
    return np.lib.stride_tricks.sliding_window_view(y, w)[:-1]


def mean_filter(y, w: int) -> np.ndarray:
    """(y_i - mu_i) / mu_i with mu_i the mean of the w previous values."""
    y = np.asarray(y, dtype=float)
    _check_window(y, w)
    windows = _trailing_windows(y, w)
    # Left-to-right accumulation, the same order as summing each window by hand.
    acc = np.zeros(windows.shape[0])
    for j in range(w):
        acc += windows[:, j]
    ref = np.full(y.shape, np.nan)
    ref[w:] = acc / w
    return _ratio(y, ref)


def diff_filter(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    ref = np.full(y.shape, np.nan)
    ref[1:] = y[:-1]
    return _ratio(y, ref)


def quantile_filter(y, w: int, q: float = 0.5) -> np.ndarray:
    """Relative deviation from the q-quantile of the w previous values
    (linear interpolation between order statistics)."""
    y = np.asarray(y, dtype=float)
    _check_window(y, w)
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    s = np.sort(_trailing_windows(y, w), axis=1)
    h = (w - 1) * q
    lo = int(np.floor(h))
    hi = min(lo + 1, w - 1)
    ref = np.full(y.shape, np.nan)
    ref[w:] = s[:, lo] + (h - lo) * (s[:, hi] - s[:, lo])
    return _ratio(y, ref)


def classify(series, down_threshold: float = -0.1, up_threshold: float = 0.1) -> list:
    """Threshold a deviation series into regimes; NaN steps map to ``None``."""
    if not down_threshold < 0.0 < up_threshold:
        raise ValueError("thresholds must satisfy down < 0 < up")
    out = []
    for v in np.asarray(series, dtype=float):
        if np.isnan(v):
            out.append(None)
        elif v < down_threshold:
            out.append(Regime.BREAKDOWN)
        elif v > up_threshold:
            out.append(Regime.RECOVERY)
        else:
            out.append(Regime.FREE_FLOW)
    return out


def run_baselines(y, w: int = 6, thresholds=(-0.1, 0.1), q: float = 0.5) -> dict:
    """All three filters plus their regime traces, keyed by method name."""
    y = np.asarray(y, dtype=float)
    out = {}
    for name, series in (
        ("mean", mean_filter(y, w)),
        ("diff", diff_filter(y)),
        ("quantile", quantile_filter(y, w, q)),
    ):
        out[name] = BaselineOutput(series, classify(series, *thresholds))
    return out


def baseline_rows(outputs: dict) -> list[dict]:
    """Per-step rows in the summary layout: regime columns are one-hot."""
    rows = []
    for name, res in outputs.items():
        for t, (v, r) in enumerate(zip(res.series, res.regimes), 1):
            row = {"t": t, "method": name, "deviation": v}
            for regime, col in ((Regime.BREAKDOWN, "p_breakdown"), (Regime.FREE_FLOW, "p_freeflow"),
                                (Regime.RECOVERY, "p_recovery")):
                row[col] = None if r is None else float(r == regime)
            rows.append(row)
    return rows
