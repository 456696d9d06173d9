"""Measurement ingestion, simulation from the model and file formats.

Measurement CSV header::

    timestamp,sensor_id,speed,count,occupancy[,regime][,<regressor columns>]

``timestamp`` is epoch seconds; empty cells mean a missing value.  The
optional ``regime`` column (breakdown / freeflow / recovery or -1 / 0 / 1)
labels history for kernel fitting.

Config files are plain ``key = value`` lines; ``#`` starts a comment and
matrices are written as row-major comma-separated lists.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import REGIMES, ModelSpec, Regime, sqrt_psd_2x2
from .regime_kernel import (
    DAY_NAMES,
    ExogenousFeatures,
    FixedKernel,
    KnnConfig,
    KnnKernel,
    LookupKernel,
    Period,
    RegimeKernel,
    categorical_from_uniform,
    knn_history_from_labels,
)

CADENCE_SECONDS = 300
DEFAULT_START = 1242259200  # 2009-05-14 00:00 UTC
MEASUREMENT_COLUMNS = ("timestamp", "sensor_id", "speed", "count", "occupancy")
SUMMARY_COLUMNS = ("t", "mean_speed", "q05", "q50", "q95", "p_breakdown", "p_freeflow", "p_recovery",
                   "mean_rate", "ess")


class DataError(ValueError):
    pass


class HeaderMismatch(DataError):
    pass


class EmptyFile(DataError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class MeasurementRecord:
    timestamp: float
    speed: float | None = None
    count: float | None = None
    occupancy: float | None = None
    sensor_id: str = ""
    regime: Regime | None = None
    regressors: tuple = ()
    gap_before: bool = False

    def __post_init__(self):
        if self.occupancy is not None and not 0.0 <= self.occupancy <= 100.0:
            raise DataError(f"occupancy {self.occupancy} outside [0, 100]")
        if self.count is not None and not self.count >= 0.0:
            raise DataError(f"count {self.count} must be non-negative")

    @property
    def speed_or_nan(self) -> float:
        return math.nan if self.speed is None else self.speed

    def features(self, recent_speeds: Sequence[float] = ()) -> ExogenousFeatures:
        return ExogenousFeatures.from_timestamp(self.timestamp, recent_speeds)


@dataclass
class RowError:
    line: int
    message: str

    def __str__(self):
        return f"line {self.line}: {self.message}"


@dataclass
class MeasurementSchema:
    """Column names in the input file; ``regressors`` lists extra numeric columns."""

    timestamp: str = "timestamp"
    sensor_id: str = "sensor_id"
    speed: str = "speed"
    count: str = "count"
    occupancy: str = "occupancy"
    regime: str = "regime"
    regressors: tuple = ()

    @property
    def required(self) -> tuple:
        return (self.timestamp, self.sensor_id, self.speed, self.count, self.occupancy) + tuple(self.regressors)


def _opt_float(text: str) -> float | None:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return None
    return float(text)


_REGIME_NAMES = {"breakdown": Regime.BREAKDOWN, "freeflow": Regime.FREE_FLOW, "free_flow": Regime.FREE_FLOW,
                 "recovery": Regime.RECOVERY, "-1": Regime.BREAKDOWN, "0": Regime.FREE_FLOW,
                 "1": Regime.RECOVERY, "+1": Regime.RECOVERY}


def parse_regime(text: str) -> Regime:
    try:
        return _REGIME_NAMES[text.strip().lower()]
    except KeyError:
        raise DataError(f"unknown regime label {text!r}") from None


def load_measurements(path, schema: MeasurementSchema | None = None):
    """Parse a measurement CSV.

    Returns ``(records, errors)``: malformed rows are skipped and reported
    with their line number instead of aborting the whole file.  Rows whose
    timestamp does not advance are rejected; gaps longer than one cadence
    set ``gap_before`` on the following record.
    """
    schema = schema or MeasurementSchema()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file or directory", str(path))
    records: list[MeasurementRecord] = []
    errors: list[RowError] = []
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyFile(f"{path} is empty")
        missing = [c for c in schema.required if c not in reader.fieldnames]
        if missing:
            raise HeaderMismatch(f"{path}: missing columns {missing}")
        has_regime = schema.regime in reader.fieldnames
        for row in reader:
            line = reader.line_num
            try:
                rec = MeasurementRecord(
                    timestamp=float(row[schema.timestamp]),
                    speed=_opt_float(row[schema.speed]),
                    count=_opt_float(row[schema.count]),
                    occupancy=_opt_float(row[schema.occupancy]),
                    sensor_id=row[schema.sensor_id],
                    regime=parse_regime(row[schema.regime]) if has_regime and row[schema.regime].strip() else None,
                    regressors=tuple(float(row[c]) for c in schema.regressors),
                )
            except (ValueError, TypeError) as exc:
                errors.append(RowError(line, str(exc)))
                continue
            if records and rec.timestamp <= records[-1].timestamp:
                errors.append(RowError(line, f"timestamp {rec.timestamp} does not advance"))
                continue
            if records and rec.timestamp - records[-1].timestamp > CADENCE_SECONDS * 1.5:
                rec.gap_before = True
            records.append(rec)
    if not records and not errors:
        raise EmptyFile(f"{path} has a header but no rows")
    return records, errors


def fill_gaps(records: Sequence[MeasurementRecord], cadence: int = CADENCE_SECONDS) -> list[MeasurementRecord]:
    """Insert missing-speed records so consecutive records are one cadence apart."""
    out: list[MeasurementRecord] = []
    for rec in records:
        if out:
            ts = out[-1].timestamp + cadence
            while rec.timestamp - ts > cadence * 0.5:
                out.append(MeasurementRecord(ts, sensor_id=rec.sensor_id, regressors=rec.regressors,
                                             gap_before=True))
                ts += cadence
        out.append(rec)
    return out


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float) and math.isnan(x):
        return ""
    return repr(float(x))


def write_measurements(path, records: Iterable[MeasurementRecord], schema: MeasurementSchema | None = None,
                       with_regime: bool = False) -> None:
    schema = schema or MeasurementSchema()
    header = list(schema.required) + ([schema.regime] if with_regime else [])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            row = [_fmt(r.timestamp), r.sensor_id, _fmt(r.speed), _fmt(r.count), _fmt(r.occupancy)]
            row += [_fmt(v) for v in r.regressors]
            if with_regime:
                row.append("" if r.regime is None else r.regime.label)
            w.writerow(row)


@dataclass
class SimulationOutput:
    true_states: np.ndarray    # (T, 2)
    true_regimes: np.ndarray   # (T,) regime codes
    measurements: np.ndarray   # (T,)
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    regressors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def records(self, sensor_id: str = "sim", with_regime: bool = False) -> list[MeasurementRecord]:
        regs = self.regressors if self.regressors.size else np.zeros((len(self.measurements), 0))
        return [
            MeasurementRecord(float(ts), float(y), sensor_id=sensor_id,
                              regime=Regime(int(a)) if with_regime else None, regressors=tuple(z))
            for ts, y, a, z in zip(self.timestamps, self.measurements, self.true_regimes, regs)
        ]


def simulate(spec: ModelSpec, kernel: RegimeKernel, T: int, seed: int, regressors=None,
             start: float = DEFAULT_START, cadence: int = CADENCE_SECONDS) -> SimulationOutput:
    """Draw regimes, states and speeds from the generative model.

    ``alpha_0`` and ``x_0`` come from the model's priors.  The kernel sees the
    features of the previous step, with the last three simulated speeds as
    its recent-speed summary.
    """
    if T < 1:
        raise ValueError("T must be at least 1")
    rng = np.random.default_rng(seed)
    p = spec.n_regressors
    Zreg = np.zeros((T, p)) if regressors is None else np.asarray(regressors, dtype=float).reshape(T, p)
    timestamps = start + cadence * np.arange(1, T + 1, dtype=float)
    a = int(categorical_from_uniform(spec.prior_regime_probs, rng.random())) - 1
    x = spec.prior_mean + sqrt_psd_2x2(spec.prior_cov) @ rng.standard_normal(2)
    states = np.empty((T, 2))
    regimes = np.empty(T, dtype=int)
    ys = np.empty(T)
    mu = spec.mu
    prev_ts = start
    recent: list[float] = []
    for t in range(T):
        Z = ExogenousFeatures.from_timestamp(prev_ts, recent[:3] or [float(x[0])])
        probs = kernel.transition_probs(Regime(a), Z)
        a = int(categorical_from_uniform(probs, rng.random())) - 1
        r = Regime(a)
        F = spec.f0 if a == 0 else 1.0
        G = np.array([[F, float(a)], [0.0, 1.0]])
        x = G @ x + (np.eye(2) - G) @ mu + sqrt_psd_2x2(spec.evo_cov[r.index]) @ rng.standard_normal(2)
        y = spec.h_row @ x + spec.gamma @ Zreg[t] + math.sqrt(spec.obs_var[r.index]) * rng.standard_normal()
        states[t], regimes[t], ys[t] = x, a, y
        recent.insert(0, float(y))
        prev_ts = timestamps[t]
    return SimulationOutput(states, regimes, ys, timestamps, Zreg)


def write_truth(path, sim: SimulationOutput) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "timestamp", "theta", "beta", "regime", "speed"])
        for t in range(len(sim.measurements)):
            w.writerow([t + 1, _fmt(sim.timestamps[t]), _fmt(sim.true_states[t, 0]), _fmt(sim.true_states[t, 1]),
                        int(sim.true_regimes[t]), _fmt(sim.measurements[t])])


def _sig6(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return f"{x:.6g}"


def write_summaries(path, rows: Sequence, fmt: str = "csv", columns: Sequence[str] | None = None) -> None:
    """Write per-step rows (``PosteriorSummary`` objects or dicts).

    Numbers are rendered with six significant digits; extra keys beyond the
    standard summary columns are appended in first-seen order.
    """
    dict_rows = [r.as_row() if hasattr(r, "as_row") else dict(r) for r in rows]
    if columns is None:
        columns = list(SUMMARY_COLUMNS)
        for r in dict_rows:
            for key in r:
                if key not in columns:
                    columns.append(key)
    path = Path(path)
    if fmt == "csv":
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in dict_rows:
                w.writerow([_cell(r.get(c)) for c in columns])
    elif fmt == "jsonl":
        with path.open("w") as fh:
            for r in dict_rows:
                fh.write(json.dumps({c: _json_value(r.get(c)) for c in columns}) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, str):
        return v
    return _sig6(v)


def _json_value(v):
    if v is None or isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return int(v)
    v = float(v)
    return None if math.isnan(v) else float(f"{v:.6g}")


def read_summaries(path) -> list[dict]:
    path = Path(path)
    if path.suffix == ".jsonl":
        return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    with path.open(newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            out.append({k: (float(v) if v not in ("", None) and k not in ("method", "regime") else v)
                        for k, v in row.items()})
        return out


# ----------------------------------------------------------------------------
# config files

def _vec(text: str) -> list[float]:
    text = text.strip()
    return [float(p) for p in text.split(",")] if text else []


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip().lower()] = value.strip()
    return out


_REGIME_KEYS = {r: r.label for r in REGIMES}


def spec_from_config(cfg: dict) -> ModelSpec:
    base = ModelSpec()
    try:
        kwargs = {}
        if "h_row" in cfg:
            kwargs["h_row"] = _vec(cfg["h_row"])
        for key in ("f0", "v_free"):
            if key in cfg:
                kwargs[key] = float(cfg[key])
        if "gamma" in cfg:
            kwargs["gamma"] = _vec(cfg["gamma"])
        obs = dict(zip(REGIMES, base.obs_var))
        if "obs_var" in cfg:
            obs = {r: float(cfg["obs_var"]) for r in REGIMES}
        for r, label in _REGIME_KEYS.items():
            if f"obs_var.{label}" in cfg:
                obs[r] = float(cfg[f"obs_var.{label}"])
        kwargs["obs_var"] = obs
        evo = dict(zip(REGIMES, base.evo_cov))
        if "evo_cov" in cfg:
            evo = {r: np.reshape(_vec(cfg["evo_cov"]), (2, 2)) for r in REGIMES}
        for r, label in _REGIME_KEYS.items():
            if f"evo_cov.{label}" in cfg:
                evo[r] = np.reshape(_vec(cfg[f"evo_cov.{label}"]), (2, 2))
        kwargs["evo_cov"] = evo
        if "prior_mean" in cfg:
            kwargs["prior_mean"] = _vec(cfg["prior_mean"])
        if "prior_cov" in cfg:
            kwargs["prior_cov"] = np.reshape(_vec(cfg["prior_cov"]), (2, 2))
        if "prior_regime_probs" in cfg:
            kwargs["prior_regime_probs"] = _vec(cfg["prior_regime_probs"])
        return base.replace(**kwargs)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def kernel_from_config(cfg: dict, base_dir: Path | None = None, v_free: float = 63.0) -> RegimeKernel:
    from .model import DEFAULT_TRANSITION

    kind = cfg.get("kernel", "fixed")
    try:
        default = np.reshape(_vec(cfg["transition"]), (3, 3)) if "transition" in cfg else DEFAULT_TRANSITION
        if kind == "fixed":
            return FixedKernel(default)
        if kind == "lookup":
            table = {}
            for key, value in cfg.items():
                parts = key.split(".")
                if parts[0] == "transition" and len(parts) == 3:
                    table[(Period(parts[1]), DAY_NAMES.index(parts[2]))] = np.reshape(_vec(value), (3, 3))
            return LookupKernel(table, default)
        if kind == "knn":
            knn_cfg = KnnConfig(
                k=int(cfg.get("knn.k", 25)),
                v_free=v_free,
                speed_weight=float(cfg.get("knn.speed_weight", 1.0)),
                time_weight=float(cfg.get("knn.time_weight", 1.0)),
                regime_weight=float(cfg.get("knn.regime_weight", 10.0)),
                weighting=cfg.get("knn.weighting", "inverse"),
            )
            if "knn.history" not in cfg:
                raise ConfigError("kernel = knn needs knn.history")
            hist_path = Path(cfg["knn.history"])
            if base_dir is not None and not hist_path.is_absolute():
                hist_path = base_dir / hist_path
            records, errors = load_measurements(hist_path)
            if errors:
                raise ConfigError(f"knn history {hist_path}: {errors[0]}")
            return KnnKernel(knn_history(records), knn_cfg)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    raise ConfigError(f"unknown kernel kind {kind!r}")


def knn_history(records: Sequence[MeasurementRecord]):
    """kNN transition records from labelled measurements, using the last three
    measured speeds (most recent first) as the speed features."""
    if any(r.regime is None for r in records):
        raise DataError("every history row needs a regime label")
    feats = []
    for i, r in enumerate(records):
        recent = [records[j].speed for j in range(i, max(-1, i - 3), -1) if records[j].speed is not None]
        feats.append(r.features(recent))
    return knn_history_from_labels([r.regime for r in records], feats)


def load_config(path):
    """Read a config file into ``(ModelSpec, RegimeKernel, raw_dict)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file or directory", str(path))
    cfg = parse_config_text(path.read_text())
    spec = spec_from_config(cfg)
    kernel = kernel_from_config(cfg, path.parent, spec.v_free)
    return spec, kernel, cfg


def _join(values) -> str:
    return ", ".join(repr(float(v)) for v in np.ravel(values))


def dump_spec(spec: ModelSpec) -> str:
    lines = [
        f"h_row = {_join(spec.h_row)}",
        f"f0 = {spec.f0!r}",
        f"v_free = {spec.v_free!r}",
        f"gamma = {_join(spec.gamma)}",
    ]
    for r in REGIMES:
        lines.append(f"obs_var.{r.label} = {float(spec.obs_var[r.index])!r}")
    for r in REGIMES:
        lines.append(f"evo_cov.{r.label} = {_join(spec.evo_cov[r.index])}")
    lines += [
        f"prior_mean = {_join(spec.prior_mean)}",
        f"prior_cov = {_join(spec.prior_cov)}",
        f"prior_regime_probs = {_join(spec.prior_regime_probs)}",
    ]
    return "\n".join(lines) + "\n"


def dump_kernel(kernel: RegimeKernel) -> str:
    if isinstance(kernel, FixedKernel):
        return f"kernel = fixed\ntransition = {_join(kernel.P)}\n"
    if isinstance(kernel, LookupKernel):
        lines = ["kernel = lookup", f"transition = {_join(kernel.default)}"]
        for (period, day), P in sorted(kernel.table.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            lines.append(f"transition.{period.value}.{DAY_NAMES[day]} = {_join(P)}")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"cannot serialise a {kernel.kind} kernel inline")
