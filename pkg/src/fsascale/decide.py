"""Pod-count decisions from a workload forecast and calibrated per-pod capacity.

With forecast total workload ``y`` and a per-pod workload band ``[lo, hi]`` at
the target utilization, ``ceil(y / hi)`` pods is the leanest allocation and
``ceil(y / lo)`` the safest. ``theta`` interpolates between the two.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calib import CalibModel, PodWorkloadBounds, predict_bounds
from .forecast import ForecastResult
from .policies import ceil_int, clamp

DECISION_HEADER = ["timestamp", "app_id", "n_min", "n_max", "n_chosen", "forecast_total", "pod_lo", "pod_hi"]


@dataclass
class DecisionConfig:
    target_cpu: float = 0.5
    theta: float = 0.5
    z: float = 1.645
    cadence: int = 600
    min_pods: int = 1
    max_pods: int = 10_000
    forecast_quantile: float | None = None  # None uses the forecast mean
    eps: float = 1e-9

    def __post_init__(self):
        if not 0.0 < self.target_cpu < 1.0:
            raise ValueError("target_cpu must lie in (0, 1)")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError("theta must lie in [0, 1]")
        if not 1 <= self.min_pods <= self.max_pods:
            raise ValueError("need 1 <= min_pods <= max_pods")
        if self.cadence <= 0:
            raise ValueError("cadence must be positive")


@dataclass
class PodDecision:
    app_id: str
    timestamp: int
    n_min: int
    n_max: int
    n_chosen: int
    forecast_total: float
    pod_bounds: PodWorkloadBounds


def pods_interval(y_total: float, bounds: PodWorkloadBounds, cfg: DecisionConfig) -> tuple[int, int]:
    """``(n_min, n_max)`` pods covering ``y_total`` at the upper / lower per-pod bound."""
    if y_total < 0:
        raise ValueError(f"total workload must be non-negative, got {y_total}")
    if not bounds.hi > 0:
        raise ValueError(f"per-pod upper bound must be positive, got {bounds.hi}")
    n_min = clamp(ceil_int(y_total / bounds.hi), cfg.min_pods, cfg.max_pods)
    if bounds.lo <= 0:
        n_max = cfg.max_pods
    else:
        n_max = clamp(ceil_int(y_total / max(bounds.lo, cfg.eps)), cfg.min_pods, cfg.max_pods)
    return n_min, n_max


def select_pods(n_min: int, n_max: int, theta: float) -> int:
    """``ceil(n_min + theta * (n_max - n_min))``: 0 saves most, 1 is safest."""
    if n_min > n_max:
        raise ValueError(f"n_min={n_min} exceeds n_max={n_max}")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    return min(n_max, ceil_int(n_min + theta * (n_max - n_min)))


def decide(app_id: str, timestamp: int, y_total: float, bounds: PodWorkloadBounds, cfg: DecisionConfig) -> PodDecision:
    n_min, n_max = pods_interval(y_total, bounds, cfg)
    return PodDecision(app_id, int(timestamp), n_min, n_max, select_pods(n_min, n_max, cfg.theta), float(y_total), bounds)


def plan(forecast: ForecastResult, calib: CalibModel, cfg: DecisionConfig, rng: np.random.Generator,
         bounds: PodWorkloadBounds | None = None) -> list[PodDecision]:
    """One decision per forecast step, effective at ``origin + (k + 1) * cadence``.

    The per-pod band does not depend on the step, so it is sampled once; pass
    ``bounds`` to reuse a band computed earlier.
    """
    if forecast.horizon < 1:
        raise ValueError("forecast horizon must be >= 1")
    if bounds is None:
        bounds = predict_bounds(calib, forecast.app_id, cfg.target_cpu, rng, z=cfg.z)
    if cfg.forecast_quantile is None:
        totals = forecast.mean
    else:
        totals = forecast.quantile(cfg.forecast_quantile)
    return [
        decide(forecast.app_id, forecast.origin + (k + 1) * cfg.cadence, max(float(y), 0.0), bounds, cfg)
        for k, y in enumerate(totals[: forecast.horizon])
    ]


def write_decisions(decisions: list[PodDecision], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DECISION_HEADER)
        for d in decisions:
            w.writerow([d.timestamp, d.app_id, d.n_min, d.n_max, d.n_chosen, repr(d.forecast_total),
                        repr(d.pod_bounds.lo), repr(d.pod_bounds.hi)])
