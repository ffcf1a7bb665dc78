"""Figures and summary tables for a simulation report."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SUMMARY_FIELDS = ["policy", "mean_rrc", "total_rrc", "slo_violation_rate", "mean_abs_cpu_dev", "pod_hours", "kwh",
                  "kg_co2", "kwh_saved_vs_baseline", "kg_co2_saved_vs_baseline"]
# PNG metadata would otherwise carry the matplotlib version string
_PNG_META = {"Software": None}


def read_plot_rows(path: str | Path) -> dict[str, dict[str, np.ndarray]]:
    """Plot-data CSV as ``policy -> {timestamp, total_pods, mean_cpu}`` arrays."""
    cols: dict[str, dict[str, list]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            c = cols.setdefault(row["policy"], {"timestamp": [], "total_pods": [], "mean_cpu": []})
            c["timestamp"].append(int(row["timestamp"]))
            c["total_pods"].append(int(row["total_pods"]))
            c["mean_cpu"].append(float(row["mean_cpu"]))
    return {p: {k: np.asarray(v) for k, v in c.items()} for p, c in cols.items()}


def write_summary(report: dict, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_FIELDS)
        for name in sorted(report["policies"]):
            m = report["policies"][name]
            w.writerow([name] + [repr(float(m[k])) for k in SUMMARY_FIELDS[1:]])


def write_per_app(report: dict, path: str | Path) -> None:
    fields = ["rrc", "pod_hours", "slo_violation_rate", "mean_abs_cpu_dev", "mean_cpu"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "app_id"] + fields)
        for name in sorted(report["policies"]):
            for app, m in sorted(report["policies"][name]["per_app"].items()):
                w.writerow([name, app] + [repr(float(m[k])) for k in fields])


def render_report(report: dict, series: dict[str, dict[str, np.ndarray]], out_dir: str | Path,
                  target_cpu: float = 0.5, slo_threshold: float = 0.85) -> list[Path]:
    """Write summary CSVs and PNG figures into ``out_dir``; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "summary.csv", out / "per_app.csv"]
    write_summary(report, paths[0])
    write_per_app(report, paths[1])
    names = sorted(series)

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 6), sharex=True)
    for name in names:
        s = series[name]
        hours = (s["timestamp"] - s["timestamp"][0]) / 3600.0
        ax1.plot(hours, s["total_pods"], label=name, lw=0.8)
        ax2.plot(hours, s["mean_cpu"], label=name, lw=0.8)
    ax2.axhline(target_cpu, color="k", ls="--", lw=0.8, label="target")
    ax2.axhline(slo_threshold, color="r", ls=":", lw=0.8, label="SLO threshold")
    ax1.set_ylabel("total pods")
    ax2.set_ylabel("mean CPU utilization")
    ax2.set_xlabel("hours since simulation start")
    ax1.legend(loc="upper right", fontsize=8)
    ax2.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    paths.append(out / "timeseries.png")
    fig.savefig(paths[-1], dpi=100, metadata=_PNG_META)
    plt.close(fig)

    pol = sorted(report["policies"])
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.5))
    for ax, key, label in zip(axes, ["mean_rrc", "slo_violation_rate", "mean_abs_cpu_dev"],
                              ["mean RRC", "SLO violation rate", "mean |cpu - target|"]):
        ax.bar(pol, [report["policies"][p][key] for p in pol], color="0.5")
        ax.set_title(label, fontsize=10)
        ax.tick_params(axis="x", labelrotation=30, labelsize=8)
    axes[0].axhline(1.0, color="k", lw=0.8)
    fig.tight_layout()
    paths.append(out / "metrics.png")
    fig.savefig(paths[-1], dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return paths
