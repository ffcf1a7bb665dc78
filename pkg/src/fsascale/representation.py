"""Multi-scale contrastive time-series representations and their store.

The encoder maps a window ``(h, F)`` to per-step vectors ``r_t = [r_t^T, r_t^F]``:

* an MLP input projection to ``D`` dims, with timestamp masking during training;
* one causal ConvTrans block (causal-conv Q/K/V, masked multi-head attention,
  output projection, residual);
* a time head: causal convs with kernel sizes ``1, 2, ..., 2**(L-1)`` averaged;
* a frequency head: magnitude spectrum of a trailing window of the contextual
  embedding, followed by an MLP.

Everything is causal, so ``r_t`` never depends on steps after ``t``.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DAY
from .diffcore import Tensor

logger = logging.getLogger(__name__)

SCALE_SECONDS = {"daily": DAY, "weekly": 7 * DAY, "monthly": 30 * DAY, "quarterly": 90 * DAY}
STORE_FORMAT = "fsascale.reprstore"
STORE_VERSION = 1


def scale_window(scale: str, step: int) -> int:
    try:
        return SCALE_SECONDS[scale] // step
    except KeyError:
        raise ValueError(f"unknown scale {scale!r}; expected one of {sorted(SCALE_SECONDS)}") from None


@dataclass
class ReprConfig:
    input_dim: int = 1
    hidden: int = 64
    k_time: int = 32
    k_freq: int = 32
    n_time_convs: int = 4
    n_heads: int = 4
    qkv_kernel: int = 3
    freq_window: int = 32
    mask_p: float = 0.5
    max_crop: int = 256
    min_overlap: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    epochs: int = 20
    iters_per_epoch: int = 10

    def __post_init__(self):
        if self.n_time_convs < 1:
            raise ValueError("n_time_convs must be >= 1")
        if min(self.hidden, self.k_time, self.k_freq, self.freq_window) < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.mask_p <= 1.0:
            raise ValueError("mask_p must lie in [0, 1]")

    @property
    def k(self) -> int:
        return self.k_time + self.k_freq


@dataclass(frozen=True)
class CropPair:
    """Two overlapping half-open views ``[a1, a2)`` and ``[b1, b2)`` sharing ``[b1, a2)``."""

    a1: int
    a2: int
    b1: int
    b2: int

    @property
    def overlap(self) -> int:
        return self.a2 - self.b1


def random_crop_pair(T: int, min_overlap: int, rng: np.random.Generator) -> CropPair:
    """Sample views with ``0 <= a1 < b1 < a2 <= b2 <= T`` and overlap >= ``min_overlap``."""
    if min_overlap < 1:
        raise ValueError("min_overlap must be >= 1")
    if T < min_overlap + 2:
        raise ValueError(f"series of length {T} too short for overlap {min_overlap}")
    length = int(rng.integers(min_overlap, T))
    b1 = int(rng.integers(1, T - length + 1))
    a2 = b1 + length
    a1 = int(rng.integers(0, b1))
    b2 = int(rng.integers(a2, T + 1))
    return CropPair(a1, a2, b1, b2)


def timestamp_mask(z: Tensor, rng: np.random.Generator, p: float = 0.5) -> Tensor:
    """Zero each timestamp's latent vector (second-to-last axis) with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    keep = rng.random(z.shape[:-1]) >= p
    return z * keep[..., None].astype(np.float64)


class ReprModel(dc.Module):
    def __init__(self, cfg: ReprConfig, rng: np.random.Generator):
        self.cfg = cfg
        D = cfg.hidden
        self.input_proj = dc.MLP(cfg.input_dim, D, D, rng)
        self.attention = dc.MultiHeadAttention(D, cfg.n_heads, rng, kernel_size=cfg.qkv_kernel)
        self.time_convs = [dc.CausalConv(D, cfg.k_time, 2**i, rng) for i in range(cfg.n_time_convs)]
        n_bins = cfg.freq_window // 2 + 1
        self.freq_mlp = dc.MLP(D * n_bins, cfg.k_freq, cfg.k_freq, rng)

    def forward(self, x, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Encode ``x (B, h, F)``; masking is applied only when ``rng`` is given."""
        x = dc.Tensor(x) if not isinstance(x, Tensor) else x
        if x.shape[1] < 1:
            raise ValueError("window must contain at least one step")
        B, h, _ = x.shape
        z = self.input_proj(x)
        if rng is not None:
            z = timestamp_mask(z, rng, self.cfg.mask_p)
        ctx = z + self.attention(z, dc.causal_mask(h))
        r_time = self.time_convs[0](ctx)
        for conv in self.time_convs[1:]:
            r_time = r_time + conv(ctx)
        r_time = r_time * (1.0 / len(self.time_convs))
        W = self.cfg.freq_window
        spec = dc.fft_magnitude(dc.sliding_windows(ctx, W)) * (1.0 / math.sqrt(W))
        r_freq = self.freq_mlp(spec.reshape(B, h, -1))
        return r_time, r_freq


def encode_window(model: ReprModel, window: np.ndarray) -> np.ndarray:
    """Per-timestamp representations ``(h, K)`` (or ``(B, h, K)`` for a batch)."""
    w = np.asarray(window, dtype=np.float64)
    single = w.ndim == 2
    if single:
        w = w[None]
    if w.ndim != 3 or w.shape[-1] != model.cfg.input_dim:
        raise ValueError(f"window shape {np.shape(window)} incompatible with input_dim={model.cfg.input_dim}")
    if w.shape[1] < 1:
        raise ValueError("window must contain at least one step")
    with dc.no_grad():
        rt, rf = model.forward(w)
    out = np.concatenate([rt.data, rf.data], axis=-1)
    return out[0] if single else out


# ------------------------------------------------------------------ losses


def _cross_view_contrast(anchor: Tensor, other: Tensor) -> Tensor:
    """Mean over anchors of -log softmax of the positive pair along axis -2.

    For anchor ``t`` the candidates are ``anchor_t . other_s`` for every ``s`` and
    ``anchor_t . anchor_s`` for ``s != t``; the positive is ``anchor_t . other_t``.
    """
    n = anchor.shape[-2]
    cross = anchor @ dc.tensor.swapaxes(other, -1, -2)
    own = anchor @ dc.tensor.swapaxes(anchor, -1, -2)
    diag = np.zeros((n, n))
    diag[np.diag_indices(n)] = -np.inf
    logits = dc.concat([cross, own + diag], axis=-1)
    pos = (anchor * other).sum(axis=-1)
    return (dc.logsumexp(logits, axis=-1) - pos).mean()


def _as_batch(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return x.reshape(1, *x.shape) if x.ndim == 2 else x


def time_contrastive_loss(view_a, view_b) -> Tensor:
    """Temporal loss on overlap-aligned reps ``(B, |T|, K)``; other timestamps are negatives."""
    a, b = _as_batch(view_a), _as_batch(view_b)
    if a.shape != b.shape:
        raise ValueError(f"view shapes differ: {a.shape} vs {b.shape}")
    if a.shape[-2] < 1:
        raise ValueError("empty overlap")
    return _cross_view_contrast(a, b)


def freq_contrastive_loss(view_a, view_b) -> Tensor:
    """Instance loss on reps ``(B, |T|, K)``; other series at the same timestamp are negatives."""
    a, b = _as_batch(view_a), _as_batch(view_b)
    if a.shape != b.shape:
        raise ValueError(f"view shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 1:
        raise ValueError("empty batch")
    return _cross_view_contrast(dc.tensor.swapaxes(a, 0, 1), dc.tensor.swapaxes(b, 0, 1))


# ---------------------------------------------------------------- training


@dataclass
class ReprTrainResult:
    model: ReprModel
    loss_curve: list[float] = field(default_factory=list)


def contrastive_step(model: ReprModel, batch: np.ndarray, crop: CropPair, rng: np.random.Generator) -> Tensor:
    """Combined loss for one batch ``(B, T, F)`` of time-aligned series."""
    va = model.forward(batch[:, crop.a1 : crop.a2], rng)
    vb = model.forward(batch[:, crop.b1 : crop.b2], rng)
    lo, n = crop.b1 - crop.a1, crop.overlap
    ta, fa = va[0][:, lo : lo + n], va[1][:, lo : lo + n]
    tb, fb = vb[0][:, :n], vb[1][:, :n]
    return time_contrastive_loss(ta, tb) + freq_contrastive_loss(fa, fb)


def train_repr(dataset: list[np.ndarray], cfg: ReprConfig, rng: np.random.Generator) -> ReprTrainResult:
    """Fit the encoder with Adam on random crop pairs of standardized series.

    ``dataset`` holds 1-D arrays (or ``(T, F)`` arrays) on a shared time grid. Each
    iteration draws up to ``batch_size`` series, one common window offset and one
    crop pair, so positions in the overlap refer to the same timestamp across the
    batch.
    """
    if not dataset:
        raise ValueError("empty dataset")
    series = [np.asarray(s, dtype=np.float64).reshape(len(s), -1) for s in dataset]
    min_len = min(len(s) for s in series)
    seg = min(cfg.max_crop, min_len)
    if seg < cfg.min_overlap + 2:
        raise ValueError(f"series of length {min_len} too short for training")
    model = ReprModel(cfg, rng)
    opt = dc.Adam(model.named_parameters(), lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for _ in range(cfg.iters_per_epoch):
            pick = np.sort(rng.choice(len(series), size=min(cfg.batch_size, len(series)), replace=False))
            offset = int(rng.integers(0, min_len - seg + 1))
            batch = np.stack([series[i][offset : offset + seg] for i in pick])
            crop = random_crop_pair(seg, cfg.min_overlap, rng)
            opt.zero_grad()
            loss = contrastive_step(model, batch, crop, rng)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"representation loss diverged at epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item()
        curve.append(total / cfg.iters_per_epoch)
        logger.debug("repr epoch %d loss %.4f", epoch, curve[-1])
    return ReprTrainResult(model, curve)


def save_repr_model(model: ReprModel, path: str | Path) -> None:
    save_checkpoint(path, model.state_dict(), {"kind": "repr", "config": asdict(model.cfg)})


def load_repr_model(path: str | Path) -> ReprModel:
    state, meta = load_checkpoint(path)
    if meta.get("kind") != "repr":
        raise ValueError(f"{path}: not a representation checkpoint")
    model = ReprModel(ReprConfig(**meta["config"]), np.random.default_rng(0))
    model.load_state_dict(state)
    return model


# ---------------------------------------------------------------- encoding


@dataclass
class MultiScaleRepr:
    app_id: str
    timestamp: int
    reps: dict[str, np.ndarray]

    def __contains__(self, scale: str) -> bool:
        return scale in self.reps


def encode_multiscale(model: ReprModel, values: np.ndarray, timestamps: np.ndarray, at: int, scales: list[str],
                      app_id: str = "") -> MultiScaleRepr:
    """Max-pooled representation of the trailing window of each scale ending at index ``at``.

    Scales whose window does not fit in the available history are omitted.
    """
    values = np.asarray(values, dtype=np.float64)
    step = int(timestamps[1] - timestamps[0]) if len(timestamps) > 1 else DAY
    reps = {}
    for scale in scales:
        w = scale_window(scale, step)
        if at + 1 < w:
            continue
        window = values[at + 1 - w : at + 1].reshape(w, -1)
        reps[scale] = encode_window(model, window).max(axis=0)
    if not reps:
        raise ValueError(f"insufficient history at index {at} for scales {scales}")
    return MultiScaleRepr(app_id, int(timestamps[at]), reps)


def _chunk_size(model: ReprModel, w: int) -> int:
    by_attn = 2_000_000 // (model.cfg.n_heads * w * w)
    by_rows = 4096 // w
    return max(1, min(by_attn, by_rows))


def encode_series(model: ReprModel, values: np.ndarray, timestamps: np.ndarray, scales: list[str],
                  every: int, app_id: str, store: ReprStore) -> int:
    """Write max-pooled reps for every ``every``-th step (1-indexed block ends) into ``store``.

    Batches windows of equal length; returns the number of vectors written.
    """
    values = np.asarray(values, dtype=np.float64).reshape(len(values), -1)
    step = int(timestamps[1] - timestamps[0])
    written = 0
    for scale in scales:
        w = scale_window(scale, step)
        ends = [t for t in range(every - 1, len(values), every) if t + 1 >= w]
        chunk = _chunk_size(model, w)
        for i in range(0, len(ends), chunk):
            batch_ends = ends[i : i + chunk]
            windows = np.stack([values[t + 1 - w : t + 1] for t in batch_ends])
            pooled = encode_window(model, windows).max(axis=1)
            for t, vec in zip(batch_ends, pooled):
                store.put(app_id, scale, int(timestamps[t]), vec)
                written += 1
    return written


# ------------------------------------------------------------------- store


class ReprStore:
    """Ordered map ``(app, scale, timestamp) -> vector`` with at-or-before lookup.

    On disk each app is one JSON-lines file ``<app_id>.jsonl``: a header line
    ``{"format": "fsascale.reprstore", "version": 1, "app_id": ..., "k": K}``
    followed by one ``{"scale", "timestamp", "values"}`` record per vector.
    """

    def __init__(self, k: int | None = None):
        self.k = k
        self._ts: dict[tuple[str, str], list[int]] = {}
        self._vecs: dict[tuple[str, str], list[np.ndarray]] = {}

    def put(self, app_id: str, scale: str, timestamp: int, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64).copy()
        if self.k is None:
            self.k = len(vec)
        if vec.shape != (self.k,) or not np.isfinite(vec).all():
            raise ValueError(f"representation must be a finite vector of length {self.k}")
        key = (app_id, scale)
        ts = self._ts.setdefault(key, [])
        vs = self._vecs.setdefault(key, [])
        i = bisect.bisect_left(ts, timestamp)
        if i < len(ts) and ts[i] == timestamp:
            vs[i] = vec
        else:
            ts.insert(i, timestamp)
            vs.insert(i, vec)

    def get(self, app_id: str, scale: str, at: int) -> np.ndarray | None:
        ts = self._ts.get((app_id, scale))
        if not ts:
            return None
        i = bisect.bisect_right(ts, at) - 1
        return None if i < 0 else self._vecs[(app_id, scale)][i].copy()

    def get_timestamp(self, app_id: str, scale: str, at: int) -> int | None:
        ts = self._ts.get((app_id, scale))
        if not ts:
            return None
        i = bisect.bisect_right(ts, at) - 1
        return None if i < 0 else ts[i]

    def multiscale(self, app_id: str, at: int, scales: list[str]) -> MultiScaleRepr:
        reps = {}
        for s in scales:
            v = self.get(app_id, s, at)
            if v is not None:
                reps[s] = v
        return MultiScaleRepr(app_id, at, reps)

    def apps(self) -> list[str]:
        return sorted({a for a, _ in self._ts})

    def __len__(self) -> int:
        return sum(len(v) for v in self._ts.values())

    def save(self, directory: str | Path) -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for app in self.apps():
            path = directory / f"{app}.jsonl"
            with path.open("w", encoding="utf-8") as fh:
                fh.write(json.dumps({"format": STORE_FORMAT, "version": STORE_VERSION, "app_id": app, "k": self.k}) + "\n")
                for (a, scale), ts in sorted(self._ts.items()):
                    if a != app:
                        continue
                    for t, v in zip(ts, self._vecs[(a, scale)]):
                        fh.write(json.dumps({"scale": scale, "timestamp": t, "values": v.tolist()}) + "\n")
            paths.append(path)
        return paths

    @classmethod
    def load(cls, directory: str | Path) -> ReprStore:
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"representation store directory not found: {directory}")
        store = cls()
        for path in sorted(directory.glob("*.jsonl")):
            with path.open(encoding="utf-8") as fh:
                header = json.loads(fh.readline())
                if header.get("format") != STORE_FORMAT or header.get("version") != STORE_VERSION:
                    raise ValueError(f"{path}: unsupported store format {header}")
                store.k = header["k"] if store.k is None else store.k
                for line in fh:
                    rec = json.loads(line)
                    store.put(header["app_id"], rec["scale"], int(rec["timestamp"]), rec["values"])
        return store
