"""``fsascale`` command line: pipeline stages, simulation and reporting.

Happy path::

    fsascale generate
    fsascale train-repr
    fsascale encode
    fsascale train-forecast
    fsascale train-calib
    fsascale simulate
    fsascale report

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .calib import calib_dataset, load_calib_model, save_calib_model, train_calib
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_defaults, load_config
from .data import CpuModel, TraceError, app_profiles, generate_synthetic, load_trace, prepare_fleet, write_trace
from .decide import write_decisions
from .forecast import evaluate, load_forecast_model, save_forecast_model, train_forecast
from .representation import ReprStore, encode_series, load_repr_model, save_repr_model, train_repr
from .rng import make_rng
from .sim import FSAModels, PolicySpec, SimConfig, simulate, write_plot_data, write_report, write_ticks

logger = logging.getLogger("fsascale")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _path(cfg: RunConfig, explicit: str | None, name: str) -> Path:
    return Path(explicit) if explicit else cfg.artifact_dir / name


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise DataError(f"missing artifact {path}; run `fsascale {producer}` first")
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _meta(cfg: RunConfig, command: str) -> dict:
    return {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed}


def _load_traces(cfg: RunConfig, explicit: str | None):
    return load_trace(_require(_path(cfg, explicit, "trace.csv"), "generate"))


def _prepared(cfg: RunConfig, traces):
    return prepare_fleet(traces, cfg.data.train_frac, cfg.data.valid_frac)


def _pool_map(fn, tasks, jobs: int):
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, tasks))
    return [fn(t) for t in tasks]


# --------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, args) -> None:
    syn = cfg.data.synthetic(cfg.seed)
    traces = generate_synthetic(syn)
    out = _path(cfg, args.out, "trace.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trace(traces, out)
    truth = {p.app_id: dataclasses.asdict(p.cpu) for p in app_profiles(syn)}
    _write_json(out.with_name(out.stem + "_ground_truth.json"), {**_meta(cfg, "generate"), "cpu_models": truth})
    rows = sum(len(t.timestamps) for t in traces.values())
    print(f"generate: wrote {rows} rows for {len(traces)} apps to {out}")


def cmd_train_repr(cfg: RunConfig, args) -> None:
    traces = _load_traces(cfg, args.trace)
    apps = _prepared(cfg, traces)
    dataset = [a.values[: a.train_end] for a in apps]
    res = train_repr(dataset, cfg.repr, make_rng(cfg.seed, "repr"))
    ckpt = cfg.artifact_dir / "repr.ckpt"
    save_repr_model(res.model, ckpt)
    _write_json(cfg.artifact_dir / "repr_metrics.json", {**_meta(cfg, "train-repr"), "loss_curve": res.loss_curve})
    print(f"train-repr: loss {res.loss_curve[0]:.4f} -> {res.loss_curve[-1]:.4f}; checkpoint {ckpt}")


def _encode_app(task):
    model, app, scales, every = task
    store = ReprStore(model.cfg.k)
    for scale in scales:
        encode_series(model, app.values, app.timestamps, [scale], int(every[scale]), app.app_id, store)
    return [(scale, int(t), store.get(app.app_id, scale, int(t)))
            for scale in scales for t in app.timestamps if store.get_timestamp(app.app_id, scale, int(t)) == int(t)]


def cmd_encode(cfg: RunConfig, args) -> None:
    traces = _load_traces(cfg, args.trace)
    model = load_repr_model(_require(_path(cfg, args.repr, "repr.ckpt"), "train-repr"))
    apps = _prepared(cfg, traces)
    scales = list(cfg.encode.scales)
    missing = [s for s in scales if s not in cfg.encode.every]
    if missing:
        raise ConfigError(f"encode.every has no cadence for scale(s) {missing}")
    parts = _pool_map(_encode_app, [(model, a, scales, cfg.encode.every) for a in apps], args.jobs)
    store = ReprStore(model.cfg.k)
    for app, part in zip(apps, parts):
        for scale, t, vec in part:
            store.put(app.app_id, scale, t, vec)
    out = cfg.artifact_dir / "store"
    store.save(out)
    _write_json(cfg.artifact_dir / "encode_metrics.json", {**_meta(cfg, "encode"), "vectors": len(store),
                                                           "scales": scales})
    print(f"encode: {len(store)} vectors for {len(apps)} apps into {out}")


def _forecast_cfg(cfg: RunConfig, k: int):
    fc = cfg.forecast
    if fc.use_repr and fc.repr_dim != k:
        fc = dataclasses.replace(fc, repr_dim=k)
    return fc


def cmd_train_forecast(cfg: RunConfig, args) -> None:
    traces = _load_traces(cfg, args.trace)
    apps = _prepared(cfg, traces)
    store = None
    if cfg.forecast.use_repr:
        store = ReprStore.load(_require(_path(cfg, args.store, "store"), "encode"))
    fc = _forecast_cfg(cfg, store.k if store else cfg.forecast.repr_dim)
    res = train_forecast(apps, store, fc, make_rng(cfg.seed, "forecast"))
    ckpt = cfg.artifact_dir / "forecast.ckpt"
    save_forecast_model(res.model, ckpt)
    metrics = evaluate(res.model, apps, store)
    _write_json(cfg.artifact_dir / "forecast_metrics.json",
                {**_meta(cfg, "train-forecast"), "nll_curve": res.nll_curve, "test": metrics, "use_repr": fc.use_repr})
    print(f"train-forecast: nll {res.nll_curve[0]:.4f} -> {res.nll_curve[-1]:.4f}; "
          f"test MAE {metrics['mae']:.2f} RMSE {metrics['rmse']:.2f}")


def cmd_train_calib(cfg: RunConfig, args) -> None:
    traces = _load_traces(cfg, args.trace)
    apps = _prepared(cfg, traces)
    data = calib_dataset(traces, cfg.calib.min_points, end={a.app_id: a.train_end for a in apps})
    res = train_calib(data, cfg.calib, make_rng(cfg.seed, "calib"))
    ckpt = cfg.artifact_dir / "calib.ckpt"
    save_calib_model(res.model, ckpt)
    post = {}
    for app in res.model.apps:
        mu, sd = res.model.posterior(app)
        post[app] = {"mean": mu.tolist(), "std": sd.tolist()}
    _write_json(cfg.artifact_dir / "calib_metrics.json",
                {**_meta(cfg, "train-calib"), "elbo_curve": res.elbo_curve, "posterior": post})
    print(f"train-calib: -elbo {res.elbo_curve[0]:.4f} -> {res.elbo_curve[-1]:.4f}; {len(res.model.apps)} apps")


def _cpu_models(trace_path: Path):
    gt = trace_path.with_name(trace_path.stem + "_ground_truth.json")
    if not gt.exists():
        return None
    doc = json.loads(gt.read_text(encoding="utf-8"))
    return {a: CpuModel(**m) for a, m in doc["cpu_models"].items()}


def sim_config(cfg: RunConfig) -> SimConfig:
    s = cfg.sim
    return SimConfig(target_cpu=s.target_cpu, slo_threshold=s.slo_threshold, kwh_per_pod_hour=s.kwh_per_pod_hour,
                     kg_co2_per_kwh=s.kg_co2_per_kwh, min_pods=s.min_pods, max_pods=s.max_pods, seed=cfg.seed,
                     rule=cfg.rule, autopilot=cfg.autopilot, decision=cfg.decide)


def cmd_simulate(cfg: RunConfig, args) -> None:
    kinds = args.policies.split(",") if args.policies else list(cfg.sim.policies)
    try:
        policies = [PolicySpec(k.strip()) for k in kinds if k.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    trace_path = _require(_path(cfg, args.trace, "trace.csv"), "generate")
    traces = load_trace(trace_path)
    apps = _prepared(cfg, traces)
    fsa = None
    if any(p.kind == "fsa" for p in policies):
        art = cfg.artifact_dir
        fm = load_forecast_model(_require(art / "forecast.ckpt", "train-forecast"))
        cal = load_calib_model(_require(art / "calib.ckpt", "train-calib"))
        store = ReprStore.load(_require(art / "store", "encode")) if fm.cfg.use_repr else None
        fsa = FSAModels(fm, cal, store, {a.app_id: a for a in apps})
    rep = simulate(traces, policies, sim_config(cfg), _cpu_models(trace_path),
                   start={a.app_id: a.valid_end for a in apps}, fsa=fsa, jobs=args.jobs)
    art = cfg.artifact_dir
    art.mkdir(parents=True, exist_ok=True)
    write_report(rep, art / "sim_report.json", _meta(cfg, "simulate"))
    write_ticks(rep, art / "sim_ticks.csv")
    write_plot_data(rep, art / "sim_plot.csv")
    if rep.decisions:
        write_decisions(rep.decisions, art / "decisions.csv")
    print(f"{'policy':<16}{'mean_rrc':>10}{'total_rrc':>11}{'slo_viol':>10}{'cpu_dev':>9}")
    for name in rep.policies:
        m = rep.metrics[name]
        print(f"{name:<16}{m['mean_rrc']:>10.4f}{m['total_rrc']:>11.4f}{m['slo_violation_rate']:>10.4f}"
              f"{m['mean_abs_cpu_dev']:>9.4f}")


def cmd_report(cfg: RunConfig, args) -> None:
    from .plotting import read_plot_rows, render_report

    art = cfg.artifact_dir
    rpath = _require(_path(cfg, args.report, "sim_report.json"), "simulate")
    ppath = _require(_path(cfg, args.plot, "sim_plot.csv"), "simulate")
    doc = json.loads(rpath.read_text(encoding="utf-8"))
    if doc.get("format") != "fsascale.simreport":
        raise DataError(f"{rpath}: not a simulation report")
    out = Path(args.out) if args.out else art / "report"
    paths = render_report(doc, read_plot_rows(ppath), out, cfg.sim.target_cpu, cfg.sim.slo_threshold)
    print(f"report: wrote {', '.join(p.name for p in paths)} to {out}")


def cmd_config(cfg: RunConfig, args) -> None:
    print(dump_defaults() if args.defaults else json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


COMMANDS = {
    "generate": cmd_generate,
    "train-repr": cmd_train_repr,
    "encode": cmd_encode,
    "train-forecast": cmd_train_forecast,
    "train-calib": cmd_train_calib,
    "simulate": cmd_simulate,
    "report": cmd_report,
    "config": cmd_config,
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("--artifacts", help="artifact directory (overrides the config)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-app phases (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="fsascale", description="Predictive horizontal autoscaling pipeline and simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("generate", parents=[common], help="write a synthetic trace CSV")
    g.add_argument("--out")
    for name in ("train-repr", "encode", "train-forecast", "train-calib", "simulate"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--trace")
        if name == "encode":
            s.add_argument("--repr")
        if name == "train-forecast":
            s.add_argument("--store")
        if name == "simulate":
            s.add_argument("--policies", help="comma-separated policy kinds")
    r = sub.add_parser("report", parents=[common], help="render figures and CSV tables from a simulation")
    r.add_argument("--report")
    r.add_argument("--plot")
    r.add_argument("--out")
    c = sub.add_parser("config", parents=[common], help="print the resolved configuration")
    c.add_argument("--defaults", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        overrides = list(args.overrides)
        if args.artifacts:
            overrides.append(f"artifacts={args.artifacts}")
        cfg = load_config(args.config, overrides)
        np.seterr(all="ignore")
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, TraceError, CheckpointError, FileNotFoundError, LookupError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
