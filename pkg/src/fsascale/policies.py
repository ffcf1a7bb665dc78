"""Reactive baseline controllers shared by the trace generator and the simulator."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

# Products such as 100 * 1.1 land a few ulps above the integer.
_INT_TOL = 1e-9


def ceil_int(x: float) -> int:
    return math.ceil(x - _INT_TOL)


def floor_int(x: float) -> int:
    return math.floor(x + _INT_TOL)


def clamp(n: int, lo: int, hi: int) -> int:
    return max(lo, min(hi, n))


@dataclass
class AppState:
    """Per-application controller state: current pods plus recent CPU readings."""

    pods: int
    cpu_history: deque = field(default_factory=lambda: deque(maxlen=64))
    pods_history: deque = field(default_factory=lambda: deque(maxlen=64))
    ticks_since_scale_up: int = 10**9

    def observe(self, cpu: float) -> None:
        """Record a reading taken while running ``self.pods`` pods."""
        self.cpu_history.append(float(cpu))
        self.pods_history.append(int(self.pods))

    def apply(self, new_pods: int) -> None:
        if new_pods > self.pods:
            self.ticks_since_scale_up = 0
        else:
            self.ticks_since_scale_up += 1
        self.pods = new_pods


@dataclass
class RuleConfig:
    up_threshold: float = 0.6
    down_threshold: float = 0.3
    step_frac: float = 0.1
    cooldown: int = 0
    min_pods: int = 1
    max_pods: int = 10_000

    def __post_init__(self):
        if not self.up_threshold > self.down_threshold:
            raise ValueError("up_threshold must exceed down_threshold")
        if not 0 < self.step_frac < 1:
            raise ValueError("step_frac must lie in (0, 1)")
        if self.min_pods < 1 or self.min_pods > self.max_pods:
            raise ValueError("need 1 <= min_pods <= max_pods")


def rule_based_policy(state: AppState, cfg: RuleConfig) -> int:
    """Threshold scaling on the latest CPU reading with a dead band."""
    if not state.cpu_history:
        return state.pods
    cpu = state.cpu_history[-1]
    pods = state.pods
    if cpu > cfg.up_threshold and state.ticks_since_scale_up >= cfg.cooldown:
        pods = ceil_int(pods * (1.0 + cfg.step_frac))
    elif cpu < cfg.down_threshold:
        pods = floor_int(pods * (1.0 - cfg.step_frac))
    return clamp(pods, cfg.min_pods, cfg.max_pods)


@dataclass
class AutopilotConfig:
    window: int = 12
    percentile: float = 95.0
    target_cpu: float = 0.5
    min_pods: int = 1
    max_pods: int = 10_000

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not 0 <= self.percentile <= 100:
            raise ValueError("percentile must lie in [0, 100]")
        if not 0 < self.target_cpu < 1:
            raise ValueError("target_cpu must lie in (0, 1)")


def autopilot_like_policy(state: AppState, cfg: AutopilotConfig) -> int:
    """Pods scale linearly with the trailing-window CPU percentile over the target.

    The percentile is taken over CPU demand in pod units (``cpu * pods`` per
    reading), which equals ``pods * percentile(cpu)`` when the count was
    constant over the window and avoids compounding stale readings after a
    change. Holds the current count until ``cfg.window`` readings are available.
    """
    if len(state.cpu_history) < cfg.window:
        return state.pods
    cpu = np.fromiter(state.cpu_history, dtype=float)[-cfg.window :]
    pods = np.fromiter(state.pods_history, dtype=float)[-cfg.window :]
    peak = float(np.percentile(cpu * pods, cfg.percentile))
    return clamp(ceil_int(peak / cfg.target_cpu), cfg.min_pods, cfg.max_pods)
