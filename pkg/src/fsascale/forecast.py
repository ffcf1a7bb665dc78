"""Representation-enhanced autoregressive workload forecaster.

A GRU encodes the nearby window into a context vector; per-scale MLPs lift the
stored long-horizon representations to the same width; multi-head
self-attention over ``{scale tokens..., context token}`` fuses them; a GRU
decoder then rolls forward emitting a Gaussian per step. Training maximizes
the teacher-forced likelihood (mean negative log-likelihood).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import norm

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import N_TIME_FEATURES, PreparedApp, ScalerParams
from .diffcore import Tensor
from .representation import MultiScaleRepr, ReprStore, scale_window

logger = logging.getLogger(__name__)


@dataclass
class ForecastConfig:
    lookback: int = 144
    horizon: int = 12
    hidden: int = 32
    n_heads: int = 4
    embed_dim: int = 4
    repr_dim: int = 64
    scales: list = field(default_factory=lambda: ["daily", "weekly"])
    use_repr: bool = True
    batch_size: int = 32
    lr: float = 2e-3
    epochs: int = 60
    iters_per_epoch: int = 20
    clip_norm: float = 5.0
    eval_stride: int = 6
    quantiles: list = field(default_factory=lambda: [0.05, 0.1, 0.5, 0.9, 0.95])

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.lookback < 1:
            raise ValueError("lookback must be >= 1")
        if self.hidden % self.n_heads:
            raise ValueError("hidden must be divisible by n_heads")


class ForecastModel(dc.Module):
    def __init__(self, cfg: ForecastConfig, n_apps: int, rng: np.random.Generator):
        self.cfg = cfg
        self.n_apps = n_apps
        H = cfg.hidden
        n_in = 1 + N_TIME_FEATURES + cfg.embed_dim
        self.embedding = dc.param(rng.normal(scale=0.1, size=(n_apps, cfg.embed_dim)))
        self.encoder = dc.GRU(n_in, H, rng)
        self.context_proj = dc.Linear(H, H, rng)
        self.scale_proj = {s: dc.MLP(cfg.repr_dim, H, H, rng) for s in cfg.scales} if cfg.use_repr else {}
        self.fusion = dc.MultiHeadAttention(H, cfg.n_heads, rng, kernel_size=1)
        self.decoder = dc.GRU(n_in, H, rng)
        self.mu_head = dc.Linear(H, 1, rng)
        self.sigma_head = dc.Linear(H, 1, rng)

    # -- building blocks

    def _embed(self, ids: np.ndarray) -> Tensor:
        if np.any((ids < 0) | (ids >= self.n_apps)):
            raise ValueError(f"app index out of range for {self.n_apps} apps")
        return self.embedding[np.asarray(ids, dtype=np.int64)]

    def context(self, y_hist: np.ndarray, cov_hist: np.ndarray, emb: Tensor) -> Tensor:
        B, L = y_hist.shape
        emb_seq = emb.reshape(B, 1, -1) + np.zeros((1, L, 1))
        x = dc.concat([Tensor(y_hist[:, :, None]), Tensor(cov_hist), emb_seq], axis=-1)
        return self.encoder.encode(x)[:, L - 1]

    def fuse(self, h: Tensor, reps: dict[str, np.ndarray] | None) -> Tensor:
        """Attention over scale tokens plus the context token; returns the context slot."""
        if h is None:
            raise ValueError("fusion needs a context vector")
        tokens = []
        if self.cfg.use_repr and reps:
            for s in self.cfg.scales:
                if s in reps:
                    tokens.append(self.scale_proj[s](Tensor(reps[s])))
        ctx = self.context_proj(h)
        tokens.append(ctx)
        seq = dc.stack(tokens, axis=1)
        n = len(tokens)
        return ctx + self.fusion(seq)[:, n - 1]

    def _emit(self, h: Tensor) -> tuple[Tensor, Tensor]:
        return self.mu_head(h)[:, 0], dc.softplus(self.sigma_head(h))[:, 0]

    def _step_input(self, y_prev, cov: np.ndarray, emb: Tensor) -> Tensor:
        y_prev = y_prev if isinstance(y_prev, Tensor) else Tensor(y_prev)
        return dc.concat([y_prev.reshape(-1, 1), Tensor(cov), emb], axis=-1)

    # -- training / inference

    def nll(self, batch: dict) -> Tensor:
        """Mean Gaussian NLL of ``y_fut`` under teacher forcing."""
        emb = self._embed(batch["ids"])
        h = self.fuse(self.context(batch["y_hist"], batch["cov_hist"], emb), batch.get("reps"))
        y_fut = batch["y_fut"]
        prev = batch["y_hist"][:, -1]
        losses = []
        for k in range(y_fut.shape[1]):
            h = self.decoder.step(self._step_input(prev, batch["cov_fut"][:, k], emb), h)
            mu, sigma = self._emit(h)
            losses.append(dc.gaussian_nll(y_fut[:, k], mu, sigma))
            prev = y_fut[:, k]
        return dc.stack(losses, axis=1).mean()

    def rollout(self, y_hist, cov_hist, cov_fut, ids, reps) -> tuple[np.ndarray, np.ndarray]:
        """Mean-propagating rollout in standardized units; returns ``(mu, sigma)`` of shape ``(B, N)``."""
        with dc.no_grad():
            emb = self._embed(np.asarray(ids))
            h = self.fuse(self.context(y_hist, cov_hist, emb), reps)
            prev = Tensor(y_hist[:, -1])
            mus, sigmas = [], []
            for k in range(cov_fut.shape[1]):
                h = self.decoder.step(self._step_input(prev, cov_fut[:, k], emb), h)
                mu, sigma = self._emit(h)
                mus.append(mu.data)
                sigmas.append(np.maximum(sigma.data, 1e-6))
                prev = mu
        return np.stack(mus, axis=1), np.stack(sigmas, axis=1)


@dataclass
class ForecastResult:
    app_id: str
    origin: int
    horizon: int
    mean: np.ndarray
    std: np.ndarray
    quantiles: dict[float, np.ndarray]

    def quantile(self, level: float) -> np.ndarray:
        if level in self.quantiles:
            return self.quantiles[level]
        return self.mean + norm.ppf(level) * self.std


def _quantiles(mean: np.ndarray, std: np.ndarray, levels) -> dict[float, np.ndarray]:
    return {float(q): mean + norm.ppf(q) * std for q in sorted(levels)}


# ------------------------------------------------------------------ windows


def min_origin(cfg: ForecastConfig, step: int) -> int:
    """Smallest origin index with a full lookback and every required scale window."""
    need = cfg.lookback - 1
    if cfg.use_repr:
        need = max([need] + [scale_window(s, step) - 1 for s in cfg.scales])
    return need


def _origin_reps(store: ReprStore, app: PreparedApp, origins: np.ndarray, scales) -> dict[str, np.ndarray]:
    reps = {s: [] for s in scales}
    missing = []
    for t in origins:
        ts = int(app.timestamps[t])
        for s in scales:
            v = store.get(app.app_id, s, ts)
            if v is None:
                missing.append((app.app_id, ts, s))
            else:
                reps[s].append(v)
    if missing:
        shown = ", ".join(f"({a}, {t}, {s})" for a, t, s in missing[:10])
        raise LookupError(f"missing representations for {len(missing)} (app, timestamp, scale): {shown}")
    return {s: np.stack(v) for s, v in reps.items()}


def make_batch(apps: list[PreparedApp], pairs, cfg: ForecastConfig, store: ReprStore | None) -> dict:
    """Gather ``(app_pos, origin)`` windows into arrays; ``pairs`` come from the same app list."""
    L, N = cfg.lookback, cfg.horizon
    y_hist, cov_hist, cov_fut, y_fut, ids = [], [], [], [], []
    by_app: dict[int, list[int]] = {}
    for j, (a, t) in enumerate(pairs):
        app = apps[a]
        y_hist.append(app.values[t - L + 1 : t + 1])
        cov_hist.append(app.time_cov[t - L + 1 : t + 1])
        cov_fut.append(app.time_cov[t + 1 : t + 1 + N])
        y_fut.append(app.values[t + 1 : t + 1 + N])
        ids.append(app.index)
        by_app.setdefault(a, []).append(j)
    batch = {
        "y_hist": np.stack(y_hist),
        "cov_hist": np.stack(cov_hist),
        "cov_fut": np.stack(cov_fut),
        "y_fut": np.stack(y_fut) if all(len(v) == N for v in y_fut) else None,
        "ids": np.array(ids),
        "reps": None,
    }
    if cfg.use_repr:
        if store is None:
            raise ValueError("representation store required when use_repr is set")
        reps = {s: np.zeros((len(pairs), cfg.repr_dim)) for s in cfg.scales}
        for a, rows in by_app.items():
            got = _origin_reps(store, apps[a], np.array([pairs[j][1] for j in rows]), cfg.scales)
            for s in cfg.scales:
                reps[s][rows] = got[s]
        batch["reps"] = reps
    return batch


# ----------------------------------------------------------------- training


@dataclass
class ForecastTrainResult:
    model: ForecastModel
    nll_curve: list[float] = field(default_factory=list)


def train_forecast(apps: list[PreparedApp], store: ReprStore | None, cfg: ForecastConfig,
                   rng: np.random.Generator) -> ForecastTrainResult:
    """Teacher-forced NLL training on windows whose targets stay inside the training split."""
    if not apps:
        raise ValueError("no applications to train on")
    ranges = []
    for a, app in enumerate(apps):
        lo = min_origin(cfg, app.step)
        hi = app.train_end - cfg.horizon - 1
        if hi >= lo:
            ranges.append((a, lo, hi))
    if not ranges:
        raise ValueError("training split too short for lookback/horizon/scales")
    if cfg.use_repr:
        # fail before training if any training origin lacks a representation
        for a, lo, hi in ranges:
            _origin_reps(store, apps[a], np.arange(lo, hi + 1, max(1, (hi - lo) // 50)), cfg.scales)
            _origin_reps(store, apps[a], np.array([lo, hi]), cfg.scales)
    model = ForecastModel(cfg, max(app.index for app in apps) + 1, rng)
    opt = dc.Adam(model.named_parameters(), lr=cfg.lr)
    params = model.parameters()
    curve = []
    for epoch in range(cfg.epochs):
        # cosine decay to 10% of the base rate
        opt.state.lr = cfg.lr * (0.1 + 0.45 * (1 + np.cos(np.pi * epoch / max(1, cfg.epochs))))
        total = 0.0
        for _ in range(cfg.iters_per_epoch):
            picks = rng.integers(0, len(ranges), size=cfg.batch_size)
            pairs = []
            for p in picks:
                a, lo, hi = ranges[p]
                pairs.append((a, int(rng.integers(lo, hi + 1))))
            batch = make_batch(apps, pairs, cfg, store)
            opt.zero_grad()
            loss = model.nll(batch)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"forecast NLL diverged at epoch {epoch}")
            loss.backward()
            dc.clip_grad_norm(params, cfg.clip_norm)
            opt.step()
            total += loss.item()
        curve.append(total / cfg.iters_per_epoch)
        logger.debug("forecast epoch %d nll %.4f", epoch, curve[-1])
    return ForecastTrainResult(model, curve)


# ---------------------------------------------------------------- inference


def predict(model: ForecastModel, app: PreparedApp, origin: int, reprs: MultiScaleRepr | None,
            horizon: int | None = None) -> ForecastResult:
    """Forecast steps ``origin+1 .. origin+N`` from history ending at ``origin`` (inclusive)."""
    return predict_many(model, app, np.array([origin]), reprs_list=[reprs], horizon=horizon)[0]


def predict_many(model: ForecastModel, app: PreparedApp, origins: np.ndarray, store: ReprStore | None = None,
                 reprs_list: list | None = None, horizon: int | None = None, chunk: int = 256) -> list[ForecastResult]:
    """Batched :func:`predict`; reps come from ``store`` (at-or-before each origin) or ``reprs_list``."""
    cfg = model.cfg
    N = horizon or cfg.horizon
    L = cfg.lookback
    origins = np.asarray(origins, dtype=np.int64)
    if np.any(origins < L - 1):
        raise ValueError(f"history too short: need {L} observations up to the origin")
    if np.any(origins + N >= len(app.time_cov)):
        raise ValueError("future covariates unavailable beyond the end of the series")
    results = []
    for i in range(0, len(origins), chunk):
        block = origins[i : i + chunk]
        y_hist = np.stack([app.values[t - L + 1 : t + 1] for t in block])
        cov_hist = np.stack([app.time_cov[t - L + 1 : t + 1] for t in block])
        cov_fut = np.stack([app.time_cov[t + 1 : t + 1 + N] for t in block])
        reps = None
        if cfg.use_repr:
            if reprs_list is not None:
                sub = reprs_list[i : i + chunk]
                scales = [s for s in cfg.scales if all(r is not None and s in r.reps for r in sub)]
                reps = {s: np.stack([r.reps[s] for r in sub]) for s in scales}
            else:
                reps = _origin_reps(store, app, block, cfg.scales)
        mu, sigma = model.rollout(y_hist, cov_hist, cov_fut, np.full(len(block), app.index), reps)
        mean = app.scaler.inverse(mu)
        std = sigma * app.scaler.std
        for j, t in enumerate(block):
            results.append(ForecastResult(app.app_id, int(app.timestamps[t]), N, mean[j], std[j],
                                          _quantiles(mean[j], std[j], cfg.quantiles)))
    return results


def error_metrics(y_true: np.ndarray, y_pred: np.ndarray) -> dict[str, float]:
    err = np.asarray(y_true, dtype=np.float64) - np.asarray(y_pred, dtype=np.float64)
    if err.size == 0:
        raise ValueError("empty evaluation set")
    return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err * err)))}


def test_origins(app: PreparedApp, cfg: ForecastConfig) -> np.ndarray:
    """Origins whose targets all fall in the test split (after ``valid_end``)."""
    lo = max(app.valid_end - 1, min_origin(cfg, app.step))
    return np.arange(lo, len(app) - cfg.horizon, cfg.eval_stride)


def evaluate(model: ForecastModel, apps: list[PreparedApp], store: ReprStore | None) -> dict[str, float]:
    """MAE/RMSE on destandardized test-split forecasts pooled over apps and steps."""
    truth, pred = [], []
    for app in apps:
        origins = test_origins(app, model.cfg)
        if len(origins) == 0:
            continue
        for res, t in zip(predict_many(model, app, origins, store=store), origins):
            truth.append(app.raw[t + 1 : t + 1 + model.cfg.horizon])
            pred.append(res.mean)
    if not truth:
        raise ValueError("empty test set")
    return error_metrics(np.concatenate(truth), np.concatenate(pred))


def save_forecast_model(model: ForecastModel, path) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "forecast", "config": asdict(model.cfg), "n_apps": model.n_apps})


def load_forecast_model(path) -> ForecastModel:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "forecast":
        raise ValueError(f"{path}: not a forecast checkpoint")
    model = ForecastModel(ForecastConfig(**meta["config"]), meta["n_apps"], np.random.default_rng(0))
    model.load_state_dict(state)
    return model


__all__ = [
    "ForecastConfig",
    "ForecastModel",
    "ForecastResult",
    "ScalerParams",
    "evaluate",
    "predict",
    "predict_many",
    "train_forecast",
]
