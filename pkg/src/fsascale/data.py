"""Trace schema, CSV ingestion, splitting, scaling and the synthetic fleet generator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .policies import AppState, RuleConfig, ceil_int, floor_int, rule_based_policy
from .rng import make_rng

logger = logging.getLogger(__name__)

CSV_HEADER = ("timestamp", "app_id", "workload_rps", "cpu_util", "pods")
DAY = 86_400
WEEK = 7 * DAY
STD_FLOOR = 1e-8


class TraceError(ValueError):
    """Base class for trace ingestion failures."""


class TraceParseError(TraceError):
    pass


class TraceSchemaError(TraceError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    timestamp: int
    app_id: str
    workload_rps: float
    cpu_util: float
    pods: int


@dataclass
class AppTrace:
    """Columnar per-application trace on a uniform time grid."""

    app_id: str
    timestamps: np.ndarray
    workload: np.ndarray
    cpu: np.ndarray
    pods: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.workload = np.asarray(self.workload, dtype=np.float64)
        self.cpu = np.asarray(self.cpu, dtype=np.float64)
        self.pods = np.asarray(self.pods, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def step(self) -> int:
        return int(self.timestamps[1] - self.timestamps[0]) if len(self) > 1 else 0

    def records(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            yield TraceRecord(
                int(self.timestamps[i]),
                self.app_id,
                float(self.workload[i]),
                float(self.cpu[i]),
                int(self.pods[i]),
            )

    def slice(self, start: int, stop: int) -> AppTrace:
        return AppTrace(
            self.app_id,
            self.timestamps[start:stop],
            self.workload[start:stop],
            self.cpu[start:stop],
            self.pods[start:stop],
        )

    def validate(self) -> None:
        n = len(self)
        if not (len(self.workload) == len(self.cpu) == len(self.pods) == n) or n == 0:
            raise TraceSchemaError(f"app {self.app_id!r}: column lengths disagree or trace is empty")
        if np.any(self.workload < 0) or not np.isfinite(self.workload).all():
            raise TraceSchemaError(f"app {self.app_id!r}: workload_rps must be finite and >= 0")
        if np.any((self.cpu < 0) | (self.cpu > 1)) or not np.isfinite(self.cpu).all():
            raise TraceSchemaError(f"app {self.app_id!r}: cpu_util must lie in [0, 1]")
        if np.any(self.pods < 1):
            raise TraceSchemaError(f"app {self.app_id!r}: pods must be >= 1")
        if n > 1:
            d = np.diff(self.timestamps)
            if d[0] <= 0:
                raise TraceSchemaError(f"app {self.app_id!r}: timestamps not strictly increasing")
            bad = np.flatnonzero(d != d[0])
            if bad.size:
                i = int(bad[0])
                raise TraceSchemaError(
                    f"app {self.app_id!r}: non-uniform grid, gap of {int(d[i])}s between "
                    f"{int(self.timestamps[i])} and {int(self.timestamps[i + 1])} (expected {int(d[0])}s)"
                )


Traces = dict  # app_id -> AppTrace, insertion-ordered by sorted app id


# ------------------------------------------------------------------- CSV I/O


def load_trace(path: str | Path) -> dict[str, AppTrace]:
    """Read a trace CSV, group rows per app, sort by time and validate the grid."""
    path = Path(path)
    rows: dict[str, list[tuple[int, float, float, int]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise TraceParseError(f"{path}:1: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise TraceParseError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            try:
                ts = int(row[0])
                app = row[1]
                w = float(row[2])
                cpu = float(row[3])
                pods = int(row[4])
            except ValueError as exc:
                raise TraceParseError(f"{path}:{lineno}: {exc}") from None
            if not app:
                raise TraceParseError(f"{path}:{lineno}: empty app_id")
            if not (math.isfinite(w) and w >= 0):
                raise TraceSchemaError(f"{path}:{lineno}: workload_rps={w} must be >= 0")
            if not (0.0 <= cpu <= 1.0):
                raise TraceSchemaError(f"{path}:{lineno}: cpu_util={cpu} outside [0, 1]")
            if pods < 1:
                raise TraceSchemaError(f"{path}:{lineno}: pods={pods} must be >= 1")
            rows.setdefault(app, []).append((ts, w, cpu, pods))
    traces: dict[str, AppTrace] = {}
    for app in sorted(rows):
        recs = sorted(rows[app], key=lambda r: r[0])
        arr = list(zip(*recs))
        tr = AppTrace(app, arr[0], arr[1], arr[2], arr[3])
        tr.validate()
        traces[app] = tr
    return traces


def write_trace(traces: dict[str, AppTrace], path: str | Path) -> None:
    """Write traces as CSV; floats use ``repr`` so a reload is lossless."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CSV_HEADER) + "\n")
        for app in sorted(traces):
            tr = traces[app]
            for ts, w, c, p in zip(tr.timestamps.tolist(), tr.workload.tolist(), tr.cpu.tolist(), tr.pods.tolist()):
                fh.write(f"{ts},{app},{w!r},{c!r},{p}\n")


# -------------------------------------------------------------- series view


@dataclass
class WorkloadSeries:
    app_id: str
    start: int
    step: int
    values: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.covariates = np.asarray(self.covariates, dtype=np.float64)
        if len(self.values) < 1 or self.covariates.shape[0] != len(self.values):
            raise ValueError("series needs T >= 1 values and one covariate row per value")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def timestamps(self) -> np.ndarray:
        return self.start + self.step * np.arange(len(self.values), dtype=np.int64)


N_TIME_FEATURES = 4


def time_features(timestamps: np.ndarray) -> np.ndarray:
    """Hour-of-day and day-of-week as sin/cos pairs; pure functions of the timestamp."""
    t = np.asarray(timestamps, dtype=np.float64)
    day = 2 * np.pi * (t % DAY) / DAY
    week = 2 * np.pi * (t % WEEK) / WEEK
    return np.column_stack([np.sin(day), np.cos(day), np.sin(week), np.cos(week)])


def to_series(trace: AppTrace, app_index: int) -> WorkloadSeries:
    """Workload series with covariates ``[time features..., app index]``."""
    cov = np.column_stack([time_features(trace.timestamps), np.full(len(trace), float(app_index))])
    step = trace.step or DAY
    return WorkloadSeries(trace.app_id, int(trace.timestamps[0]), step, trace.workload.copy(), cov)


def split_points(T: int, train_frac: float, valid_frac: float) -> tuple[int, int]:
    """Return ``(train_end, valid_end)`` indices of a chronological split."""
    if not (train_frac > 0 and valid_frac > 0 and train_frac + valid_frac < 1):
        raise ValueError("need train_frac > 0, valid_frac > 0 and train_frac + valid_frac < 1")
    n_train = floor_int(T * train_frac)
    n_valid = floor_int(T * valid_frac)
    if n_train < 1 or n_valid < 1 or T - n_train - n_valid < 1:
        raise ValueError(
            f"split of T={T} with {train_frac}/{valid_frac} gives an empty segment "
            f"({n_train}/{n_valid}/{T - n_train - n_valid})"
        )
    return n_train, n_train + n_valid


def _sub(series: WorkloadSeries, a: int, b: int) -> WorkloadSeries:
    return WorkloadSeries(series.app_id, series.start + a * series.step, series.step, series.values[a:b], series.covariates[a:b])


def split(series: WorkloadSeries, train_frac: float, valid_frac: float) -> tuple[WorkloadSeries, WorkloadSeries, WorkloadSeries]:
    a, b = split_points(len(series), train_frac, valid_frac)
    return _sub(series, 0, a), _sub(series, a, b), _sub(series, b, len(series))


@dataclass(frozen=True)
class ScalerParams:
    mean: float
    std: float

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def fit_scaler(values: np.ndarray) -> ScalerParams:
    v = np.asarray(values, dtype=np.float64)
    return ScalerParams(float(v.mean()), max(float(v.std()), STD_FLOOR))


def standardize(series: WorkloadSeries, params: ScalerParams | None = None) -> tuple[WorkloadSeries, ScalerParams]:
    """Z-score ``series``; fit the parameters on it when none are given (training split)."""
    if params is None:
        params = fit_scaler(series.values)
    return replace(series, values=params.transform(series.values)), params


# ------------------------------------------------------------------ synthetic


@dataclass
class SyntheticConfig:
    num_apps: int = 10
    days: int = 60
    step: int = 600
    base_level: float = 20_000.0
    daily_amp: float = 8_000.0
    weekly_amp: float = 5_000.0
    trend_slope: float = 40.0
    noise_std: float = 600.0
    burst_rate: float = 0.3
    burst_magnitude: float = 4_000.0
    burst_duration: float = 3_600.0
    cpu_slope: float = 0.001
    cpu_offset: float = 0.05
    cpu_noise_std: float = 0.02
    app_scale_spread: float = 0.5
    cpu_slope_spread: float = 0.3
    initial_cpu: float = 0.45
    start: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.num_apps < 1 or self.days < 1:
            raise ValueError("num_apps and days must be positive")
        if self.step < 1 or DAY % self.step:
            raise ValueError(f"step={self.step} must be a positive divisor of one day")
        for name in ("daily_amp", "weekly_amp", "noise_std", "burst_rate", "burst_magnitude", "cpu_noise_std",
                     "app_scale_spread", "cpu_slope_spread"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.cpu_slope <= 0:
            raise ValueError("cpu_slope must be > 0")
        if not self.cpu_offset < self.initial_cpu < 1:
            raise ValueError("need cpu_offset < initial_cpu < 1")

    @property
    def steps(self) -> int:
        return self.days * DAY // self.step


@dataclass(frozen=True)
class CpuModel:
    """Ground-truth CPU response ``clip(slope * per_pod_load + offset + noise, 0.01, 1)``."""

    slope: float
    offset: float
    noise_std: float = 0.0

    def response(self, per_pod_load, std_normal=0.0):
        raw = self.slope * np.asarray(per_pod_load, dtype=np.float64) + self.offset + self.noise_std * std_normal
        return np.clip(raw, 0.01, 1.0)


@dataclass(frozen=True)
class AppProfile:
    app_id: str
    daily_phase: float
    weekly_phase: float
    scale: float
    cpu: CpuModel = field(default_factory=lambda: CpuModel(0.001, 0.05))


def app_id_for(i: int) -> str:
    return f"app{i:03d}"


def app_profiles(cfg: SyntheticConfig) -> list[AppProfile]:
    out = []
    for i in range(cfg.num_apps):
        r = make_rng(cfg.seed, "profile", i)
        phases = r.uniform(0, 2 * np.pi, size=2)
        scale = float(np.exp(cfg.app_scale_spread * r.standard_normal()))
        slope = float(cfg.cpu_slope * np.exp(cfg.cpu_slope_spread * r.standard_normal()))
        out.append(AppProfile(app_id_for(i), float(phases[0]), float(phases[1]), scale,
                              CpuModel(slope, cfg.cpu_offset, cfg.cpu_noise_std)))
    return out


def synthetic_workload(cfg: SyntheticConfig, profile: AppProfile, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Timestamps and workload for one app (seasonal + trend + bursts + noise, floored at 0)."""
    n = cfg.steps
    rel = cfg.step * np.arange(n, dtype=np.int64)
    ts = cfg.start + rel
    t = ts.astype(np.float64)
    r = make_rng(cfg.seed, "workload", index)
    w = (
        cfg.base_level
        + cfg.daily_amp * np.sin(2 * np.pi * t / DAY + profile.daily_phase)
        + cfg.weekly_amp * np.sin(2 * np.pi * t / WEEK + profile.weekly_phase)
        + cfg.trend_slope * rel / DAY
    )
    n_bursts = int(r.poisson(cfg.burst_rate * cfg.days))
    onsets = r.integers(0, n, size=n_bursts)
    amps = cfg.burst_magnitude * r.uniform(0.5, 1.5, size=n_bursts)
    for k0, amp in zip(onsets, amps):
        lag = rel[k0:] - rel[k0]
        w[k0:] += amp * np.exp(-lag / cfg.burst_duration)
    w += cfg.noise_std * r.standard_normal(n)
    return ts, np.maximum(profile.scale * w, 0.0)


def generate_synthetic(cfg: SyntheticConfig) -> dict[str, AppTrace]:
    """Synthetic fleet whose pods come from the threshold controller, so cpu/pods are self-consistent."""
    controller = RuleConfig(max_pods=10**7)
    traces = {}
    for i, prof in enumerate(app_profiles(cfg)):
        ts, w = synthetic_workload(cfg, prof, i)
        noise = make_rng(cfg.seed, "cpu", i).standard_normal(len(w))
        cpu = np.empty(len(w))
        pods = np.empty(len(w), dtype=np.int64)
        p0 = prof.cpu.slope * w[0] / (cfg.initial_cpu - prof.cpu.offset)
        state = AppState(pods=max(1, ceil_int(p0)))
        for k in range(len(w)):
            pods[k] = state.pods
            cpu[k] = prof.cpu.response(w[k] / state.pods, noise[k])
            state.observe(cpu[k])
            state.apply(rule_based_policy(state, controller))
        tr = AppTrace(prof.app_id, ts, w, cpu, pods)
        tr.validate()
        traces[prof.app_id] = tr
    return traces


@dataclass
class PreparedApp:
    """Standardized per-app view shared by the training and simulation stages."""

    app_id: str
    index: int
    timestamps: np.ndarray
    raw: np.ndarray
    values: np.ndarray
    scaler: ScalerParams
    time_cov: np.ndarray
    train_end: int
    valid_end: int

    @property
    def step(self) -> int:
        return int(self.timestamps[1] - self.timestamps[0])

    def __len__(self) -> int:
        return len(self.values)


def prepare_fleet(traces: dict[str, AppTrace], train_frac: float = 0.7, valid_frac: float = 0.1) -> list[PreparedApp]:
    """Split each app chronologically and z-score it with training-split statistics."""
    out = []
    for i, app in enumerate(sorted(traces)):
        series = to_series(traces[app], i)
        train, _, _ = split(series, train_frac, valid_frac)
        _, params = standardize(train)
        a, b = split_points(len(series), train_frac, valid_frac)
        out.append(PreparedApp(app, i, series.timestamps, series.values.copy(), params.transform(series.values),
                               params, series.covariates[:, :N_TIME_FEATURES].copy(), a, b))
    return out
