import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trafficpf.data_io import (
    ConfigError,
    DataError,
    EmptyFile,
    HeaderMismatch,
    MeasurementRecord,
    MeasurementSchema,
    SUMMARY_COLUMNS,
    dump_kernel,
    dump_spec,
    fill_gaps,
    kernel_from_config,
    knn_history,
    load_measurements,
    parse_config_text,
    read_summaries,
    simulate,
    spec_from_config,
    write_measurements,
    write_summaries,
)
from trafficpf.model import DEFAULT_TRANSITION, Regime, default_spec
from trafficpf.particle_filter import PosteriorSummary
from trafficpf.regime_kernel import FixedKernel, KnnKernel, LookupKernel, Period, stationary_distribution

HEADER = "timestamp,sensor_id,speed,count,occupancy\n"


def _write(tmp_path, text, name="m.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_occupancy_boundary_accepted(tmp_path):
    records, errors = load_measurements(_write(tmp_path, HEADER + "300,s1,55.0,12,100\n"))
    assert not errors and records[0].occupancy == 100.0


def test_bad_rows_reported_with_line_numbers(tmp_path):
    text = HEADER + "300,s1,55.0,12,40\n600,s1,54.0,12,140\n900,s1,abc,1,1\n900,s1,50,1,1\n1200,s1,50,-3,1\n"
    records, errors = load_measurements(_write(tmp_path, text))
    assert [r.timestamp for r in records] == [300.0, 900.0]
    assert [e.line for e in errors] == [3, 4, 6]
    assert "140" in str(errors[0])


def test_missing_cells_become_none(tmp_path):
    records, _ = load_measurements(_write(tmp_path, HEADER + "300,s1,,,\n"))
    assert records[0].speed is None and np.isnan(records[0].speed_or_nan)


def test_file_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_measurements(tmp_path / "absent.csv")
    with pytest.raises(EmptyFile):
        load_measurements(_write(tmp_path, ""))
    with pytest.raises(EmptyFile):
        load_measurements(_write(tmp_path, HEADER))
    with pytest.raises(HeaderMismatch):
        load_measurements(_write(tmp_path, "time,speed\n1,2\n"))


def test_gaps_flagged_and_filled(tmp_path):
    records, _ = load_measurements(_write(tmp_path, HEADER + "300,s,50,,\n600,s,51,,\n1500,s,52,,\n"))
    assert [r.gap_before for r in records] == [False, False, True]
    filled = fill_gaps(records)
    assert [r.timestamp for r in filled] == [300, 600, 900, 1200, 1500]
    assert filled[2].speed is None and filled[3].speed is None


def test_regime_column_and_regressors(tmp_path):
    text = "timestamp,sensor_id,speed,count,occupancy,regime,rain\n300,s,50,,,breakdown,1\n600,s,51,,,+1,0\n"
    records, errors = load_measurements(_write(tmp_path, text), MeasurementSchema(regressors=("rain",)))
    assert not errors
    assert records[0].regime is Regime.BREAKDOWN and records[1].regime is Regime.RECOVERY
    assert records[0].regressors == (1.0,)


def test_record_validation():
    with pytest.raises(DataError):
        MeasurementRecord(0.0, 50.0, occupancy=101.0)
    with pytest.raises(DataError):
        MeasurementRecord(0.0, 50.0, count=-1.0)


def test_simulated_day_round_trip(tmp_path, spec, default_kernel):
    sim = simulate(spec, default_kernel, 288, seed=4)
    original = sim.records("s7", with_regime=True)
    path = tmp_path / "day.csv"
    write_measurements(path, original, with_regime=True)
    loaded, errors = load_measurements(path)
    assert not errors
    assert loaded == original


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 120, allow_nan=False) | st.none(), st.floats(0, 1e4) | st.none(),
                          st.floats(0, 100) | st.none()), min_size=1, max_size=20))
def test_write_load_identity(tmp_path_factory, rows):
    path = tmp_path_factory.mktemp("rt") / "m.csv"
    records = [MeasurementRecord(1e9 + 300.0 * i, s, c, o, "x") for i, (s, c, o) in enumerate(rows)]
    write_measurements(path, records)
    loaded, errors = load_measurements(path)
    assert not errors and loaded == records


def test_simulate_noiseless_fixed_point():
    spec = default_spec(obs_var=1e-30, evo_cov=np.zeros((2, 2)), prior_cov=np.zeros((2, 2)),
                      prior_regime_probs=[0, 1, 0])
    kernel = FixedKernel(np.tile([0.0, 1.0, 0.0], (3, 1)))
    sim = simulate(spec, kernel, 50, seed=1)
    np.testing.assert_allclose(sim.measurements, 63.0, atol=1e-12)
    assert np.all(sim.true_regimes == 0)


def test_simulate_deterministic(spec, default_kernel):
    a = simulate(spec, default_kernel, 20, seed=9)
    b = simulate(spec, default_kernel, 20, seed=9)
    np.testing.assert_array_equal(a.measurements, b.measurements)
    np.testing.assert_array_equal(a.true_regimes, b.true_regimes)
    assert a.true_states.shape == (20, 2) and len(a.true_regimes) == len(a.measurements) == 20


def test_simulate_rejects_empty(spec, default_kernel):
    with pytest.raises(ValueError):
        simulate(spec, default_kernel, 0, seed=1)


def test_simulated_regime_frequencies(spec, default_kernel):
    regimes = np.concatenate([simulate(spec, default_kernel, 288, seed=s).true_regimes for s in range(100)])
    freq = np.bincount(regimes + 1, minlength=3) / regimes.size
    np.testing.assert_allclose(freq, stationary_distribution(DEFAULT_TRANSITION), atol=0.02)


def _summary(t):
    return PosteriorSummary(t, 61.234567891, -0.5, (58.0, 61.2345678, 64.5), np.array([0.1, 0.8, 0.1]), 9876.54321)


def test_summaries_empty_and_single(tmp_path):
    p = tmp_path / "s.csv"
    write_summaries(p, [])
    assert p.read_text() == ",".join(SUMMARY_COLUMNS) + "\n"
    write_summaries(p, [_summary(1)])
    lines = p.read_text().splitlines()
    assert len(lines) == 2
    assert lines[1].split(",")[1] == "61.2346"


@pytest.mark.parametrize("fmt, name", [("csv", "s.csv"), ("jsonl", "s.jsonl")])
def test_summaries_round_trip(tmp_path, fmt, name):
    p = tmp_path / name
    rows = [_summary(t) for t in range(1, 4)]
    write_summaries(p, rows, fmt)
    back = read_summaries(p)
    for r, b in zip(rows, back):
        for key, value in r.as_row().items():
            assert b[key] == pytest.approx(float(value), rel=5e-6)


def test_jsonl_is_valid_json(tmp_path):
    p = tmp_path / "s.jsonl"
    write_summaries(p, [_summary(1)], "jsonl")
    row = json.loads(p.read_text())
    assert row["t"] == 1 and row["ess"] == 9876.54


def test_config_round_trip():
    spec = default_spec(gamma=[0.5], obs_var={Regime.BREAKDOWN: 9.0, Regime.FREE_FLOW: 4.0, Regime.RECOVERY: 5.0})
    back = spec_from_config(parse_config_text(dump_spec(spec)))
    for name in ("h_row", "gamma", "obs_var", "evo_cov", "prior_mean", "prior_cov", "prior_regime_probs"):
        np.testing.assert_array_equal(getattr(back, name), getattr(spec, name))
    assert back.f0 == spec.f0 and back.v_free == spec.v_free


def test_config_defaults_are_builtin_values():
    spec = spec_from_config({})
    np.testing.assert_array_equal(spec.obs_var, [4.0, 4.0, 4.0])
    np.testing.assert_array_equal(spec.evo_cov[1], [[1.9, 0], [0, 4.5]])
    kernel = kernel_from_config({})
    np.testing.assert_array_equal(kernel.matrix(), DEFAULT_TRANSITION)


def test_config_errors():
    with pytest.raises(ConfigError):
        parse_config_text("f0 0.5")
    with pytest.raises(ConfigError):
        spec_from_config({"f0": "2.0"})
    with pytest.raises(ConfigError):
        spec_from_config({"evo_cov": "1, 2, 3"})
    with pytest.raises(ConfigError):
        kernel_from_config({"kernel": "neural"})
    with pytest.raises(ConfigError):
        kernel_from_config({"transition": "1, 0, 0"})


def test_lookup_kernel_config_round_trip():
    table = {(Period.MORNING_PEAK, 0): np.tile([0.5, 0.5, 0.0], (3, 1))}
    kernel = LookupKernel(table, DEFAULT_TRANSITION)
    back = kernel_from_config(parse_config_text(dump_kernel(kernel)))
    assert isinstance(back, LookupKernel)
    np.testing.assert_array_equal(back.table[(Period.MORNING_PEAK, 0)], table[(Period.MORNING_PEAK, 0)])


def test_knn_kernel_from_labelled_history(tmp_path, spec, default_kernel):
    sim = simulate(spec, default_kernel, 400, seed=3)
    write_measurements(tmp_path / "hist.csv", sim.records(with_regime=True), with_regime=True)
    cfg = parse_config_text("kernel = knn\nknn.history = hist.csv\nknn.k = 30\n")
    kernel = kernel_from_config(cfg, tmp_path)
    assert isinstance(kernel, KnnKernel) and len(kernel.history) == 399
    records, _ = load_measurements(tmp_path / "hist.csv")
    first = knn_history(records)[2]
    assert first.features.recent_speeds == tuple(records[j].speed for j in (2, 1, 0))
