"""Task-conditioned Bayesian calibration of per-pod workload against CPU utilization.

Each application gets a diagonal Gaussian posterior over ``beta = (w, b)`` in
``y_pod = w * cpu + b``. The posterior parameters are not stored per app: a
small task projector maps the app's one-hot id to an embedding and a linear
hypernetwork maps that embedding to ``(mu_w, mu_b, s_w, s_b)`` with
``std = softplus(s)``. Training minimizes the per-datum negative ELBO with
reparameterized Monte Carlo samples and a learned global observation noise.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import AppTrace
from .diffcore import Tensor

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


@dataclass
class CalibConfig:
    embed_dim: int = 16
    n_mc: int = 8
    lr: float = 1e-2
    epochs: int = 1500
    batch_size: int | None = 4096
    normalize: bool = True
    obs_std: float | None = None  # fixed known noise; None means learned
    init_obs_std: float = 0.1
    min_points: int = 10
    n_samples: int = 1000
    z: float = 1.645

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if self.n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        if self.obs_std is not None and self.obs_std <= 0:
            raise ValueError("obs_std must be positive")


@dataclass(frozen=True)
class CalibData:
    """Columnar calibration set; ``app`` holds integer indices into ``apps``."""

    apps: tuple
    app: np.ndarray
    cpu: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class PodWorkloadBounds:
    app_id: str
    target_cpu: float
    mean: float
    std: float
    lo: float
    hi: float
    z: float
    n_samples: int


def _inv_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


class CalibModel(dc.Module):
    def __init__(self, apps, cfg: CalibConfig, rng: np.random.Generator, y_scale=None):
        self.cfg = cfg
        self.apps = list(apps)
        self.index = {a: i for i, a in enumerate(self.apps)}
        E = cfg.embed_dim
        self.task_hidden = dc.Linear(len(self.apps), E, rng)
        self.task_out = dc.Linear(E, E, rng)
        self.hyper = dc.Linear(E, 4, rng)
        self.obs_raw = dc.param(np.array([_inv_softplus(cfg.init_obs_std)]))
        self.y_scale = np.ones(len(self.apps)) if y_scale is None else np.asarray(y_scale, dtype=np.float64)

    def app_indices(self, app_ids) -> np.ndarray:
        try:
            return np.array([self.index[a] for a in app_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"unknown app id {exc.args[0]!r}") from None

    def task_embed(self, idx: np.ndarray) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        if np.any((idx < 0) | (idx >= len(self.apps))):
            raise KeyError(f"app index out of range for {len(self.apps)} apps")
        onehot = np.eye(len(self.apps))[idx]
        return self.task_out(dc.relu(self.task_hidden(Tensor(onehot))))

    def hyper_params(self, emb: Tensor) -> tuple[Tensor, Tensor]:
        """Posterior mean ``(.., 2)`` and std ``(.., 2)`` (both in normalized units)."""
        raw = self.hyper(emb)
        return raw[..., :2], dc.softplus(raw[..., 2:])

    def posterior(self, app_id: str) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and std of ``(w, b)`` for one app, in workload units."""
        i = self.app_indices([app_id])
        with dc.no_grad():
            mu, sd = self.hyper_params(self.task_embed(i))
        return mu.data[0] * self.y_scale[i[0]], sd.data[0] * self.y_scale[i[0]]

    def obs_std(self) -> Tensor:
        if self.cfg.obs_std is not None:
            return Tensor(np.array([self.cfg.obs_std]))
        return dc.softplus(self.obs_raw)


def kl_standard_normal(mu: Tensor, std: Tensor) -> Tensor:
    """Closed-form KL(N(mu, diag std^2) || N(0, I)) summed over all entries."""
    var = std * std
    return ((var + mu * mu - 1.0 - dc.log(var)) * 0.5).sum()


def expected_loglik(model: CalibModel, app_idx, cpu, y, n_mc: int, rng: np.random.Generator) -> Tensor:
    """Monte Carlo estimate of ``sum_i E_q[log N(y_i | w x_i + b, sigma^2)]`` (normalized units)."""
    app_idx = np.asarray(app_idx, dtype=np.int64)
    uniq, inv = np.unique(app_idx, return_inverse=True)
    mu, sd = model.hyper_params(model.task_embed(uniq))
    eps = rng.standard_normal((n_mc, len(uniq), 2))
    beta = mu + sd * eps  # (S, A, 2)
    w, b = beta[:, inv, 0], beta[:, inv, 1]  # (S, N)
    pred = w * np.asarray(cpu)[None] + b
    sigma = model.obs_std()
    resid = (np.asarray(y)[None] - pred) / sigma
    ll = (resid * resid) * -0.5 - dc.log(sigma) - 0.5 * LOG_2PI
    return ll.sum() * (1.0 / n_mc)


def elbo_loss(model: CalibModel, app_idx, cpu, y, n_mc: int, rng: np.random.Generator,
              n_total: int | None = None) -> Tensor:
    """Negative ELBO per datum: ``(KL - E log p) / N``.

    KL covers every app in ``app_idx``. With minibatches pass ``n_total`` so
    the likelihood is rescaled to the full set (an unbiased estimate).
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise ValueError("empty calibration batch")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    n_total = n_total or len(y)
    uniq = np.unique(np.asarray(app_idx, dtype=np.int64))
    mu, sd = model.hyper_params(model.task_embed(uniq))
    kl = kl_standard_normal(mu, sd)
    ll = expected_loglik(model, app_idx, cpu, y, n_mc, rng)
    return kl * (1.0 / n_total) - ll * (1.0 / len(y))


def calib_dataset(traces: dict[str, AppTrace], min_points: int = 10, end: dict[str, int] | None = None) -> CalibData:
    """``(app, cpu, workload/pods)`` rows; apps with fewer than ``min_points`` rows are dropped."""
    apps, idx, cpu, y = [], [], [], []
    for app in sorted(traces):
        tr = traces[app]
        n = len(tr.timestamps) if end is None else end[app]
        ok = tr.pods[:n] > 0
        if ok.sum() < min_points:
            logger.warning("calibration: app %s has %d usable points (< %d); excluded", app, ok.sum(), min_points)
            continue
        k = len(apps)
        apps.append(app)
        idx.append(np.full(int(ok.sum()), k))
        cpu.append(tr.cpu[:n][ok])
        y.append(tr.workload[:n][ok] / tr.pods[:n][ok])
    if not apps:
        raise ValueError("no application has enough calibration data")
    return CalibData(tuple(apps), np.concatenate(idx), np.concatenate(cpu), np.concatenate(y))


@dataclass
class CalibTrainResult:
    model: CalibModel
    elbo_curve: list


def train_calib(data: CalibData, cfg: CalibConfig, rng: np.random.Generator) -> CalibTrainResult:
    """Adam on the negative ELBO; one step per epoch over a minibatch (or the full set)."""
    if len(data) == 0:
        raise ValueError("empty calibration dataset")
    n_apps = len(data.apps)
    if cfg.normalize:
        y_scale = np.array([np.mean(np.abs(data.y[data.app == i])) for i in range(n_apps)])
        y_scale = np.where(y_scale > 0, y_scale, 1.0)
    else:
        y_scale = np.ones(n_apps)
    y_norm = data.y / y_scale[data.app]
    model = CalibModel(data.apps, cfg, rng, y_scale)
    params = dict(model.named_parameters())
    if cfg.obs_std is not None:
        params.pop("obs_raw")
    opt = dc.Adam(params.items(), lr=cfg.lr)
    curve = []
    N = len(data)
    for epoch in range(cfg.epochs):
        opt.state.lr = cfg.lr * (0.05 + 0.475 * (1 + np.cos(np.pi * epoch / max(1, cfg.epochs))))
        if cfg.batch_size and cfg.batch_size < N:
            sel = rng.choice(N, size=cfg.batch_size, replace=False)
        else:
            sel = slice(None)
        opt.zero_grad()
        loss = elbo_loss(model, data.app[sel], data.cpu[sel], y_norm[sel], cfg.n_mc, rng, n_total=N)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"calibration ELBO diverged at epoch {epoch}")
        loss.backward()
        opt.step()
        curve.append(loss.item())
    logger.debug("calib: elbo %.4f -> %.4f", curve[0], curve[-1])
    return CalibTrainResult(model, curve)


def predict_bounds(model: CalibModel, app_id: str, target_cpu: float, rng: np.random.Generator,
                   n_samples: int | None = None, z: float | None = None) -> PodWorkloadBounds:
    """Sample ``beta`` from the app's posterior and summarize ``w * target_cpu + b``."""
    n = model.cfg.n_samples if n_samples is None else n_samples
    z = model.cfg.z if z is None else z
    if not 0.0 < target_cpu < 1.0:
        raise ValueError(f"target_cpu must lie in (0, 1), got {target_cpu}")
    if n < 2:
        raise ValueError("n_samples must be >= 2")
    mu, sd = model.posterior(app_id)
    eps = rng.standard_normal((n, 2))
    beta = mu + sd * eps
    ys = beta[:, 0] * target_cpu + beta[:, 1]
    mean, std = float(ys.mean()), float(ys.std())
    return PodWorkloadBounds(app_id, float(target_cpu), mean, std, max(mean - z * std, 0.0),
                             max(mean + z * std, 0.0), float(z), int(n))


def save_calib_model(model: CalibModel, path) -> None:
    state = dict(model.state_dict())
    state["y_scale"] = model.y_scale
    save_checkpoint(path, state, {"kind": "calib", "config": asdict(model.cfg), "apps": model.apps})


def load_calib_model(path) -> CalibModel:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "calib":
        raise ValueError(f"{path}: not a calibration checkpoint")
    y_scale = state.pop("y_scale")
    model = CalibModel(meta["apps"], CalibConfig(**meta["config"]), np.random.default_rng(0), y_scale)
    model.load_state_dict(state)
    return model
