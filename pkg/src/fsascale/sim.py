"""Discrete-time autoscaling simulator with common random numbers.

Each application replays its workload tick by tick. The policy's pod count
sets the per-pod load, the ground-truth CPU model (with pre-drawn noise shared
by every policy) gives utilization, and the policy then picks the pod count for
the next tick. Policies are scored against the rule-based baseline.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .calib import CalibModel, predict_bounds
from .data import AppTrace, CpuModel, PreparedApp
from .decide import DecisionConfig, PodDecision, decide
from .forecast import ForecastModel, predict_many
from .policies import AppState, AutopilotConfig, RuleConfig, autopilot_like_policy, clamp, rule_based_policy
from .representation import ReprStore
from .rng import make_rng

logger = logging.getLogger(__name__)

# 947 t CO2 for 1 538 000 kWh
KG_CO2_PER_KWH = 947_000.0 / 1_538_000.0
POLICY_KINDS = ("fsa", "rule_based", "autopilot_like", "fixed")
BASELINE = "rule_based"


def cpu_response(per_pod_workload, model: CpuModel, std_normal=0.0):
    """Utilization in ``[0.01, 1]`` for a per-pod load and a standard-normal draw."""
    if np.any(np.asarray(per_pod_workload) < 0):
        raise ValueError("per-pod workload must be non-negative")
    return model.response(per_pod_workload, std_normal)


def rrc(c: float, c_r: float) -> float:
    """Relative resource consumption ``c / c_r``."""
    if c_r == 0:
        raise ZeroDivisionError("baseline consumption is zero")
    return float(c) / float(c_r)


def carbon_report(pod_hours_saved: float, kwh_per_pod_hour: float = 0.05,
                  kg_co2_per_kwh: float = KG_CO2_PER_KWH) -> dict[str, float]:
    if kwh_per_pod_hour <= 0 or kg_co2_per_kwh <= 0:
        raise ValueError("emission factors must be positive")
    kwh = pod_hours_saved * kwh_per_pod_hour
    return {"kwh": kwh, "kg_co2": kwh * kg_co2_per_kwh}


@dataclass
class PolicySpec:
    kind: str
    name: str | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}; expected one of {POLICY_KINDS}")
        self.name = self.name or self.kind


@dataclass
class SimConfig:
    target_cpu: float = 0.5
    slo_threshold: float = 0.85
    kwh_per_pod_hour: float = 0.05
    kg_co2_per_kwh: float = KG_CO2_PER_KWH
    min_pods: int = 1
    max_pods: int = 10_000
    seed: int = 0
    rule: RuleConfig = field(default_factory=RuleConfig)
    autopilot: AutopilotConfig = field(default_factory=AutopilotConfig)
    decision: DecisionConfig = field(default_factory=DecisionConfig)

    def __post_init__(self):
        if not 0 < self.target_cpu < 1:
            raise ValueError("target_cpu must lie in (0, 1)")
        if not 1 <= self.min_pods <= self.max_pods:
            raise ValueError("need 1 <= min_pods <= max_pods")


@dataclass
class FSAModels:
    forecast: ForecastModel
    calib: CalibModel
    store: ReprStore | None
    prepared: dict[str, PreparedApp]


@dataclass
class AppRun:
    pods: np.ndarray
    cpu: np.ndarray


@dataclass
class SimReport:
    apps: list[str]
    policies: list[str]
    step: int
    start_index: dict[str, int]
    timestamps: dict[str, np.ndarray]
    workload: dict[str, np.ndarray]
    runs: dict[str, dict[str, AppRun]]  # policy -> app -> run
    metrics: dict
    decisions: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"format": "fsascale.simreport", "version": 1, "baseline": BASELINE, "step": self.step,
                "apps": self.apps, "policies": self.metrics}


def fit_cpu_model(trace: AppTrace) -> CpuModel:
    """Least-squares CPU model from a trace, for replay when ground truth is unknown."""
    x = trace.workload / trace.pods
    ok = (trace.cpu > 0.011) & (trace.cpu < 0.999)
    X = np.column_stack([x[ok], np.ones(ok.sum())])
    (a, c), *_ = np.linalg.lstsq(X, trace.cpu[ok], rcond=None)
    resid = trace.cpu[ok] - X @ np.array([a, c])
    return CpuModel(float(a), float(c), float(resid.std()))


def _fsa_targets(app: str, models: FSAModels, start: int, end: int, cfg: SimConfig) -> list[PodDecision]:
    """Decisions made at ticks ``start .. end-2`` for the following tick (forecast is open-loop)."""
    prep = models.prepared[app]
    origins = np.arange(start, end - 1)
    results = predict_many(models.forecast, prep, origins, store=models.store, horizon=1)
    dcfg = cfg.decision
    bounds = predict_bounds(models.calib, app, dcfg.target_cpu, make_rng(cfg.seed, "sim-bounds", app), z=dcfg.z)
    out = []
    for res in results:
        y = res.mean[0] if dcfg.forecast_quantile is None else res.quantile(dcfg.forecast_quantile)[0]
        out.append(decide(app, res.origin + prep.step, max(float(y), 0.0), bounds, dcfg))
    return out


def simulate_app(app: str, workload: np.ndarray, pods0: int, cpu_model: CpuModel, policies: list[PolicySpec],
                 cfg: SimConfig, noise: np.ndarray, fsa_targets: list[int] | None = None) -> dict[str, AppRun]:
    """Run every policy on one app's workload slice with the same noise draws."""
    n = len(workload)
    runs = {}
    for spec in policies:
        pods = np.empty(n, dtype=np.int64)
        cpu = np.empty(n)
        state = AppState(pods=int(pods0))
        fixed = None
        if spec.kind == "fixed":
            fixed = spec.params.get("pods", {}).get(app) if isinstance(spec.params.get("pods"), dict) else spec.params.get("pods")
            fixed = np.broadcast_to(np.asarray(pods0 if fixed is None else fixed, dtype=np.int64), (n,))
            state.pods = int(fixed[0])
        for k in range(n):
            pods[k] = state.pods
            cpu[k] = cpu_response(workload[k] / state.pods, cpu_model, noise[k])
            state.observe(cpu[k])
            if k == n - 1:
                break
            if spec.kind == "rule_based":
                new = rule_based_policy(state, cfg.rule)
            elif spec.kind == "autopilot_like":
                new = autopilot_like_policy(state, cfg.autopilot)
            elif spec.kind == "fixed":
                new = int(fixed[k + 1])
            else:
                new = int(fsa_targets[k])
            state.apply(clamp(new, cfg.min_pods, cfg.max_pods))
        runs[spec.name] = AppRun(pods, cpu)
    return runs


def _score(runs: dict[str, dict[str, AppRun]], apps: list[str], step: int, cfg: SimConfig) -> dict:
    hours = step / 3600.0
    base = {a: float(runs[BASELINE][a].pods.sum()) * hours for a in apps}
    out = {}
    for name, per_app in runs.items():
        rows = {}
        for a in apps:
            r = per_app[a]
            ph = float(r.pods.sum()) * hours
            rows[a] = {
                "rrc": rrc(ph, base[a]),
                "pod_hours": ph,
                "slo_violation_rate": float(np.mean(r.cpu > cfg.slo_threshold)),
                "mean_abs_cpu_dev": float(np.mean(np.abs(r.cpu - cfg.target_cpu))),
                "mean_cpu": float(np.mean(r.cpu)),
            }
        total = sum(v["pod_hours"] for v in rows.values())
        kwh = total * cfg.kwh_per_pod_hour
        saved = carbon_report(sum(base.values()) - total, cfg.kwh_per_pod_hour, cfg.kg_co2_per_kwh)
        out[name] = {
            "mean_rrc": float(np.mean([v["rrc"] for v in rows.values()])),
            "total_rrc": rrc(total, sum(base.values())),
            "slo_violation_rate": float(np.mean([v["slo_violation_rate"] for v in rows.values()])),
            "mean_abs_cpu_dev": float(np.mean([v["mean_abs_cpu_dev"] for v in rows.values()])),
            "pod_hours": total,
            "kwh": kwh,
            "kg_co2": kwh * cfg.kg_co2_per_kwh,
            "kwh_saved_vs_baseline": saved["kwh"],
            "kg_co2_saved_vs_baseline": saved["kg_co2"],
            "per_app": rows,
        }
    return out


def _run_one(args):
    return simulate_app(*args)


def simulate(traces: dict[str, AppTrace], policies: list[PolicySpec], cfg: SimConfig,
             cpu_models: dict[str, CpuModel] | None = None, start: dict[str, int] | int = 0,
             fsa: FSAModels | None = None, jobs: int = 1) -> SimReport:
    """Simulate ``policies`` on ticks ``start[app] ..`` of every trace.

    The rule-based baseline is always simulated since every score is relative
    to it. Noise for the CPU model is drawn once per app from ``cfg.seed`` and
    shared by all policies.
    """
    if not traces:
        raise ValueError("no traces to simulate")
    policies = list(policies)
    names = [p.name for p in policies]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate policy names: {names}")
    if BASELINE not in names:
        policies.insert(0, PolicySpec(BASELINE))
    if any(p.kind == "fsa" for p in policies) and fsa is None:
        raise ValueError("fsa policy requested but forecast/calibration models were not provided")
    apps = sorted(traces)
    if fsa is not None and any(p.kind == "fsa" for p in policies):
        missing = [a for a in apps if a not in fsa.prepared or a not in fsa.calib.index]
        if missing:
            raise ValueError(f"fsa models do not cover apps {missing}")
    cpu_models = cpu_models or {a: fit_cpu_model(traces[a]) for a in apps}
    starts = {a: int(start[a] if isinstance(start, dict) else start) for a in apps}

    tasks, decisions = [], []
    for a in apps:
        tr = traces[a]
        s = starts[a]
        w = tr.workload[s:]
        if len(w) < 2:
            raise ValueError(f"app {a}: simulation window shorter than 2 ticks")
        noise = make_rng(cfg.seed, "sim-noise", a).standard_normal(len(w))
        targets = None
        if any(p.kind == "fsa" for p in policies):
            made = _fsa_targets(a, fsa, s, len(tr.workload), cfg)
            decisions.extend(made)
            targets = [d.n_chosen for d in made]
        pods0 = int(tr.pods[s])
        tasks.append((a, w, pods0, cpu_models[a], policies, cfg, noise, targets))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]

    runs = {p.name: {} for p in policies}
    for a, res in zip(apps, results):
        for name, run in res.items():
            runs[name][a] = run
    step = int(traces[apps[0]].timestamps[1] - traces[apps[0]].timestamps[0])
    report = SimReport(apps, [p.name for p in policies], step, starts,
                       {a: traces[a].timestamps[starts[a]:] for a in apps},
                       {a: traces[a].workload[starts[a]:] for a in apps}, runs, {}, decisions)
    report.metrics = _score(runs, apps, step, cfg)
    return report


def write_report(report: SimReport, path: str | Path, extra: dict | None = None) -> None:
    doc = report.to_json()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_ticks(report: SimReport, path: str | Path) -> None:
    """Per-tick log ``timestamp,app_id,policy,workload,pods,cpu``."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "app_id", "policy", "workload", "pods", "cpu"])
        for name in report.policies:
            for a in report.apps:
                run = report.runs[name][a]
                for t, y, p, c in zip(report.timestamps[a], report.workload[a], run.pods, run.cpu):
                    w.writerow([int(t), a, name, repr(float(y)), int(p), repr(float(c))])


def plot_data(report: SimReport) -> list[dict]:
    """Fleet totals per tick and policy: total pods and mean cpu."""
    a0 = report.apps[0]
    n = min(len(report.timestamps[a]) for a in report.apps)
    rows = []
    for name in report.policies:
        pods = np.sum([report.runs[name][a].pods[:n] for a in report.apps], axis=0)
        cpu = np.mean([report.runs[name][a].cpu[:n] for a in report.apps], axis=0)
        for t, p, c in zip(report.timestamps[a0][:n], pods, cpu):
            rows.append({"timestamp": int(t), "policy": name, "total_pods": int(p), "mean_cpu": float(c)})
    return rows


def write_plot_data(report: SimReport, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "policy", "total_pods", "mean_cpu"])
        for r in plot_data(report):
            w.writerow([r["timestamp"], r["policy"], r["total_pods"], repr(r["mean_cpu"])])


def sim_config_dict(cfg: SimConfig) -> dict:
    return asdict(cfg)
