import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsascale.data import (
    DAY,
    AppTrace,
    CpuModel,
    ScalerParams,
    SyntheticConfig,
    TraceParseError,
    TraceSchemaError,
    WorkloadSeries,
    generate_synthetic,
    load_trace,
    split,
    standardize,
    time_features,
    to_series,
    write_trace,
)


def _write(path, lines):
    path.write_text("timestamp,app_id,workload_rps,cpu_util,pods\n" + "\n".join(lines) + "\n")
    return path


def test_load_three_rows_sorted(tmp_path):
    p = _write(tmp_path / "t.csv", ["1200,a,3.0,0.2,2", "0,a,1.0,0.1,1", "600,a,2.0,0.15,1"])
    traces = load_trace(p)
    assert list(traces) == ["a"]
    assert traces["a"].timestamps.tolist() == [0, 600, 1200]
    assert traces["a"].workload.tolist() == [1.0, 2.0, 3.0]


def test_load_rejects_cpu_above_one(tmp_path):
    p = _write(tmp_path / "t.csv", ["0,a,1.0,0.1,1", "600,a,1.0,1.7,1"])
    with pytest.raises(TraceSchemaError, match=":3:"):
        load_trace(p)


def test_load_malformed_row_has_line_number(tmp_path):
    p = _write(tmp_path / "t.csv", ["0,a,1.0,0.1,1", "600,a,abc,0.1,1"])
    with pytest.raises(TraceParseError, match=":3:"):
        load_trace(p)


def test_load_non_uniform_grid_names_app(tmp_path):
    p = _write(tmp_path / "t.csv", ["0,web,1.0,0.1,1", "600,web,1.0,0.1,1", "1800,web,1.0,0.1,1"])
    with pytest.raises(TraceSchemaError, match="web.*1200s|web.*gap"):
        load_trace(p)


def _reference_parse(path):
    groups = {}
    with open(path) as fh:
        for line in fh.read().splitlines()[1:]:
            ts, app, w, c, p = line.split(",")
            groups.setdefault(app, []).append((int(ts), float(w), float(c), int(p)))
    return {a: sorted(v) for a, v in groups.items()}


def test_interleaved_apps_match_reference_parser(tmp_path):
    lines = []
    for k in range(6):
        lines.append(f"{k * 600},b,{k + 0.5},0.2,{k + 1}")
        lines.append(f"{(5 - k) * 300},a,{k * 2.0},0.3,1")
    p = _write(tmp_path / "t.csv", lines)
    traces = load_trace(p)
    ref = _reference_parse(p)
    assert sorted(traces) == ["a", "b"]
    for app, rows in ref.items():
        tr = traces[app]
        assert list(zip(tr.timestamps.tolist(), tr.workload.tolist(), tr.cpu.tolist(), tr.pods.tolist())) == rows
        assert len(set(np.diff(tr.timestamps))) == 1


def test_csv_round_trip_is_lossless(tmp_path):
    traces = generate_synthetic(SyntheticConfig(num_apps=2, days=2, seed=5))
    write_trace(traces, tmp_path / "a.csv")
    again = load_trace(tmp_path / "a.csv")
    for app in traces:
        for field in ("timestamps", "workload", "cpu", "pods"):
            np.testing.assert_array_equal(getattr(traces[app], field), getattr(again[app], field))
    write_trace(again, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_synthetic_single_sinusoid_is_daily_periodic():
    cfg = SyntheticConfig(num_apps=1, days=3, noise_std=0, burst_rate=0, weekly_amp=0, trend_slope=0, app_scale_spread=0)
    tr = generate_synthetic(cfg)["app000"]
    per_day = DAY // cfg.step
    np.testing.assert_allclose(tr.workload[per_day:], tr.workload[:-per_day], rtol=0, atol=1e-9)


def test_cpu_model_affine():
    assert CpuModel(0.001, 0.05, 0.0).response(100.0) == pytest.approx(0.15, abs=1e-15)


def test_synthetic_cpu_consistent_with_pods():
    cfg = SyntheticConfig(num_apps=1, days=2, cpu_noise_std=0.0, cpu_slope_spread=0.0)
    tr = generate_synthetic(cfg)["app000"]
    expected = np.clip(cfg.cpu_slope * tr.workload / tr.pods + cfg.cpu_offset, 0.01, 1.0)
    np.testing.assert_allclose(tr.cpu, expected, atol=1e-15)


def test_synthetic_deterministic():
    cfg = SyntheticConfig(num_apps=3, days=3, seed=11)
    a, b = generate_synthetic(cfg), generate_synthetic(cfg)
    for app in a:
        assert a[app].workload.tobytes() == b[app].workload.tobytes()
        assert a[app].cpu.tobytes() == b[app].cpu.tobytes()
        assert a[app].pods.tobytes() == b[app].pods.tobytes()
    c = generate_synthetic(SyntheticConfig(num_apps=3, days=3, seed=12))
    assert a["app000"].workload.tobytes() != c["app000"].workload.tobytes()


def test_synthetic_invariants():
    traces = generate_synthetic(SyntheticConfig(num_apps=2, days=7, seed=3))
    for tr in traces.values():
        tr.validate()
        assert tr.cpu.min() >= 0.01 and tr.cpu.max() <= 1.0
        assert tr.workload.min() >= 0


def test_autocorrelation_peaks_at_one_day():
    cfg = SyntheticConfig(num_apps=1, days=28, weekly_amp=0, trend_slope=0, burst_rate=0, seed=2)
    assert cfg.daily_amp > 3 * cfg.noise_std
    w = generate_synthetic(cfg)["app000"].workload
    w = w - w.mean()
    per_day = DAY // cfg.step
    lags = np.arange(per_day // 2, 3 * per_day // 2)
    ac = [np.dot(w[:-lag], w[lag:]) / (len(w) - lag) for lag in lags]
    assert lags[int(np.argmax(ac))] == per_day


def test_config_rejects_negative_amplitude():
    with pytest.raises(ValueError):
        SyntheticConfig(daily_amp=-1.0)


def _series(n):
    return WorkloadSeries("a", 0, 600, np.arange(n, dtype=float), np.zeros((n, 5)))


def test_split_lengths():
    tr, va, te = split(_series(100), 0.7, 0.1)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    assert va.start == 70 * 600 and te.start == 80 * 600


def test_split_degenerate():
    with pytest.raises(ValueError):
        split(_series(10), 0.95, 0.04)


@given(st.integers(20, 500), st.floats(0.05, 0.8), st.floats(0.05, 0.15))
@settings(max_examples=60, deadline=None)
def test_split_partition_identity(n, a, b):
    s = _series(n)
    try:
        parts = split(s, a, b)
    except ValueError:
        return
    np.testing.assert_array_equal(np.concatenate([p.values for p in parts]), s.values)
    np.testing.assert_array_equal(np.concatenate([p.covariates for p in parts]), s.covariates)


def test_standardize_population_std():
    s = WorkloadSeries("a", 0, 600, [1.0, 2.0, 3.0], np.zeros((3, 1)))
    z, p = standardize(s)
    assert p.mean == 2.0
    assert p.std == pytest.approx(np.sqrt(2 / 3))
    assert abs(z.values.mean()) < 1e-15


def test_standardize_constant_series():
    s = WorkloadSeries("a", 0, 600, [4.0] * 5, np.zeros((5, 1)))
    z, p = standardize(s)
    assert p.std == 1e-8
    np.testing.assert_array_equal(z.values, 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50))
def test_standardize_round_trip(vals):
    s = WorkloadSeries("a", 0, 600, vals, np.zeros((len(vals), 1)))
    z, p = standardize(s)
    back = p.inverse(z.values)
    np.testing.assert_allclose(back, s.values, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(vals))))


def test_standardize_with_given_params():
    s = WorkloadSeries("a", 0, 600, [1.0, 3.0], np.zeros((2, 1)))
    z, p = standardize(s, ScalerParams(1.0, 2.0))
    assert z.values.tolist() == [0.0, 1.0] and p == ScalerParams(1.0, 2.0)


def test_series_covariates_are_time_functions():
    tr = AppTrace("a", [0, 600, 1200], [1, 2, 3], [0.1, 0.1, 0.1], [1, 1, 1])
    s = to_series(tr, 4)
    np.testing.assert_array_equal(s.covariates[:, :4], time_features(np.array([0, 600, 1200])))
    assert s.covariates[:, 4].tolist() == [4.0, 4.0, 4.0]
    np.testing.assert_array_equal(time_features(np.array([DAY * 7 + 600]))[0, :2], time_features(np.array([600]))[0, :2])


def test_written_csv_header(tmp_path):
    write_trace(generate_synthetic(SyntheticConfig(num_apps=1, days=1)), tmp_path / "x.csv")
    with open(tmp_path / "x.csv") as fh:
        assert next(csv.reader(fh)) == ["timestamp", "app_id", "workload_rps", "cpu_util", "pods"]
