"""Command-line entry point.

Subcommands: simulate, filter, learn, baseline, fit-kernel.  Every run
writes its output plus ``<output>.manifest.json`` recording the options,
the config text, input checksums and library versions.

Exit codes:

    0  success
    1  unexpected internal error
    2  usage error (bad flags or values)
    3  configuration error
    4  file not found / I/O error
    5  input data error (header mismatch, empty file, bad labels)
    6  numerical failure (all weights zero, non-PD covariance)

Failures print one line to stderr: ``trafficpf: error[<KIND>]: <message>``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import WindowTooLong, baseline_rows, run_baselines
from .data_io import (
    CADENCE_SECONDS,
    DEFAULT_START,
    ConfigError,
    DataError,
    MeasurementSchema,
    dump_kernel,
    fill_gaps,
    kernel_from_config,
    load_measurements,
    parse_config_text,
    simulate,
    spec_from_config,
    write_measurements,
    write_summaries,
    write_truth,
)
from .learning import LearningPriors, NonConjugateConfig
from .model import DimensionMismatch, InvalidSpec, NonPositiveDefinite
from .particle_filter import MODES, RESAMPLERS, AllWeightsZero, run_filter
from .regime_kernel import ExogenousFeatures, FixedKernel, fit_lookup_kernel, fit_map_transition

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_DATA, EXIT_NUMERIC = range(7)


class UsageError(Exception):
    pass


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _thresholds(text):
    try:
        lo, hi = (float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected DOWN,UP") from None
    if not lo < 0 < hi:
        raise argparse.ArgumentTypeError("need DOWN < 0 < UP")
    return lo, hi


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="trafficpf", description="Regime-switching particle filter for traffic speed")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_input=True):
        sp.add_argument("--config", help="model/kernel config file (key = value); built-in defaults if omitted")
        if needs_input:
            sp.add_argument("--input", required=True, help="measurement CSV")
        sp.add_argument("--output", required=True)

    def filtering(sp):
        common(sp)
        sp.add_argument("--particles", type=_positive_int, default=10_000)
        sp.add_argument("--seed", type=int, required=True)
        sp.add_argument("--mode", choices=MODES, default="adapted")
        sp.add_argument("--resampling", choices=RESAMPLERS, default="multinomial")
        sp.add_argument("--threads", type=_positive_int, default=1)
        sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    sp = sub.add_parser("simulate", help="draw a synthetic day from the model")
    common(sp, needs_input=False)
    sp.add_argument("--steps", type=int, default=288)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--start", type=float, default=DEFAULT_START, help="epoch seconds before the first step")
    sp.add_argument("--truth", help="also write true states and regimes here")
    sp.add_argument("--sensor-id", default="sim")
    sp.add_argument("--labels", action="store_true", help="include the true regime column")

    filtering(sub.add_parser("filter", help="filter a measurement series"))
    filtering(sub.add_parser("learn", help="filter while learning observation variances / gamma"))

    sp = sub.add_parser("baseline", help="naive mean / difference / quantile filters")
    common(sp)
    sp.add_argument("--window", type=_positive_int, default=6)
    sp.add_argument("--thresholds", type=_thresholds, default=(-0.1, 0.1))
    sp.add_argument("--quantile", type=float, default=0.5)
    sp.add_argument("--format", choices=("csv", "jsonl"), default="csv")

    sp = sub.add_parser("fit-kernel", help="MAP transition matrix from labelled history")
    common(sp)
    sp.add_argument("--prior", type=float, default=1.0, help="Dirichlet pseudo-count for every cell")
    sp.add_argument("--lookup", action="store_true", help="fit one matrix per (period, day of week)")
    return p


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_config(path):
    if path is None:
        return {}, ""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(2, "No such file or directory", str(path))
    text = path.read_text()
    return parse_config_text(text), text


def _schema(cfg: dict) -> MeasurementSchema:
    regs = tuple(c.strip() for c in cfg.get("regressors", "").split(",") if c.strip())
    return MeasurementSchema(regressors=regs)


def _write_manifest(args, cfg_text: str, extra: dict) -> None:
    options = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())}
    manifest = {
        "command": args.command,
        "options": options,
        "config_text": cfg_text,
        "versions": {
            "trafficpf": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
    }
    if getattr(args, "input", None):
        manifest["input_sha256"] = _sha256(args.input)
    manifest.update(extra)
    Path(str(args.output) + ".manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _cmd_simulate(args):
    if args.steps < 1:
        raise UsageError(f"--steps must be >= 1, got {args.steps}")
    cfg, text = _load_config(args.config)
    spec = spec_from_config(cfg)
    kernel = kernel_from_config(cfg, Path(args.config).parent if args.config else None, spec.v_free)
    T = args.steps
    regressors = np.ones((T, spec.n_regressors)) if spec.n_regressors else None
    sim = simulate(spec, kernel, T, args.seed, regressors=regressors, start=args.start)
    schema = _schema(cfg)
    if len(schema.regressors) != spec.n_regressors:
        schema = MeasurementSchema(regressors=tuple(f"z{j}" for j in range(spec.n_regressors)))
    write_measurements(args.output, sim.records(args.sensor_id, args.labels), schema, with_regime=args.labels)
    if args.truth:
        write_truth(args.truth, sim)
    _write_manifest(args, text, {"rows": T})


def _measurements(args, cfg):
    records, errors = load_measurements(args.input, _schema(cfg))
    for e in errors:
        print(f"trafficpf: warning: {args.input}: {e}", file=sys.stderr)
    return fill_gaps(records), errors


def _cmd_filter(args, learn: bool):
    cfg, text = _load_config(args.config)
    spec = spec_from_config(cfg)
    kernel = kernel_from_config(cfg, Path(args.config).parent if args.config else None, spec.v_free)
    records, errors = _measurements(args, cfg)
    ys = np.array([r.speed_or_nan for r in records])
    features = [ExogenousFeatures.from_timestamp(r.timestamp - CADENCE_SECONDS) for r in records]
    regressors = [r.regressors for r in records] if spec.n_regressors else None
    priors = _priors(cfg) if learn else None
    run = run_filter(spec, kernel, ys, args.particles, args.seed, features, regressors,
                     args.mode, args.resampling, args.threads, priors)
    write_summaries(args.output, run.summaries, args.format)
    _write_manifest(args, text, {"rows": len(run.summaries), "skipped_rows": [str(e) for e in errors],
                                 "log_marginal_likelihood": float(f"{run.state.log_marginal_lik:.12g}")})


def _priors(cfg: dict) -> LearningPriors:
    def flag(key, default):
        v = cfg.get(key)
        return default if v is None else v.strip().lower() in ("1", "true", "yes", "on")

    def vec(key):
        return [float(p) for p in cfg[key].split(",")] if key in cfg else None

    try:
        a0 = vec("learn.a0")
        b0 = vec("learn.b0")
        prec = vec("learn.gamma_precision")
        return LearningPriors(
            a0=2.0 if a0 is None else np.array(a0),
            b0=4.0 if b0 is None else np.array(b0),
            gamma_mean=vec("learn.gamma_mean"),
            gamma_precision=None if prec is None else np.reshape(prec, (int(round(len(prec) ** 0.5)),) * 2),
            learn_obs_var=flag("learn.obs_var", True),
            learn_gamma=flag("learn.gamma", None),
            pooled_obs_var=flag("learn.pooled_obs_var", False),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_baseline(args):
    cfg, text = _load_config(args.config)
    records, errors = _measurements(args, cfg)
    ys = np.array([r.speed_or_nan for r in records])
    outputs = run_baselines(ys, args.window, args.thresholds, args.quantile)
    cols = ["t", "method", "deviation", "p_breakdown", "p_freeflow", "p_recovery"]
    write_summaries(args.output, baseline_rows(outputs), args.format, columns=cols)
    _write_manifest(args, text, {"rows": len(ys) * len(outputs), "skipped_rows": [str(e) for e in errors]})


def _cmd_fit_kernel(args):
    cfg, text = _load_config(args.config)
    records, errors = load_measurements(args.input, _schema(cfg))
    if any(r.regime is None for r in records):
        raise DataError("fit-kernel needs a regime label on every row")
    prior = np.full((3, 3), args.prior)
    if args.lookup:
        history = [(r.regime, r.features()) for r in records]
        kernel = fit_lookup_kernel(history, prior)
    else:
        kernel = FixedKernel(fit_map_transition([r.regime for r in records], prior))
    Path(args.output).write_text(dump_kernel(kernel))
    _write_manifest(args, text, {"transitions": len(records) - 1, "skipped_rows": [str(e) for e in errors]})


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "simulate":
            _cmd_simulate(args)
        elif args.command in ("filter", "learn"):
            _cmd_filter(args, learn=args.command == "learn")
        elif args.command == "baseline":
            _cmd_baseline(args)
        elif args.command == "fit-kernel":
            _cmd_fit_kernel(args)
        return EXIT_OK
    except UsageError as exc:
        return _fail(EXIT_USAGE, "USAGE", exc)
    except (ConfigError, InvalidSpec, NonConjugateConfig) as exc:
        return _fail(EXIT_CONFIG, "CONFIG", exc)
    except OSError as exc:
        detail = f"{exc.strerror}: {exc.filename}" if exc.strerror and exc.filename else exc
        return _fail(EXIT_IO, "IO", detail)
    except (DataError, DimensionMismatch, WindowTooLong) as exc:
        return _fail(EXIT_DATA, "DATA", exc)
    except (AllWeightsZero, NonPositiveDefinite) as exc:
        return _fail(EXIT_NUMERIC, "NUMERIC", exc)
    except Exception as exc:  # noqa: BLE001
        return _fail(EXIT_INTERNAL, "INTERNAL", f"{type(exc).__name__}: {exc}")


def _fail(code: int, kind: str, exc) -> int:
    msg = " ".join(str(exc).split())
    print(f"trafficpf: error[{kind}]: {msg}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())
