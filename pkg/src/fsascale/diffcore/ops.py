"""Fused model operations with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, add, as_tensor, make, matmul, softmax, swapaxes

NEG_INF = -np.inf


def causal_mask(n: int) -> np.ndarray:
    """Additive attention mask: ``-inf`` strictly above the diagonal, else 0."""
    m = np.zeros((n, n))
    m[np.triu_indices(n, k=1)] = NEG_INF
    return m


def dilated_causal_conv(x: Tensor, kernel: Tensor, dilation: int = 1, bias: Tensor | None = None) -> Tensor:
    """1-D causal convolution over the second-to-last (time) axis.

    ``x`` has shape ``(..., T, C_in)`` and ``kernel`` ``(k, C_in, C_out)``.
    Tap ``j`` of the kernel looks back ``(k - 1 - j) * dilation`` steps, so the
    last tap sees the current step. Inputs are left-padded with zeros.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1:
        raise ValueError(f"dilation must be >= 1, got {dilation}")
    if kernel.ndim != 3 or x.shape[-1] != kernel.shape[1]:
        raise ValueError(f"shape mismatch: x {x.shape} vs kernel {kernel.shape}")
    k = kernel.shape[0]
    T = x.shape[-2]
    pad = (k - 1) * dilation
    width = [(0, 0)] * (x.ndim - 2) + [(pad, 0), (0, 0)]
    xp = np.pad(x.data, width)
    W = kernel.data
    out = np.zeros(x.shape[:-1] + (W.shape[2],))
    for j in range(k):
        out += xp[..., j * dilation : j * dilation + T, :] @ W[j]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., j * dilation : j * dilation + T, :] += g @ W[j].T
            gx = gxp[..., pad:, :]
        if kernel.requires_grad:
            g2 = g.reshape(-1, g.shape[-1])
            gw = np.stack(
                [
                    xp[..., j * dilation : j * dilation + T, :].reshape(-1, W.shape[1]).T @ g2
                    for j in range(k)
                ]
            )
        return gx, gw

    y = make(out, (x, kernel), backward)
    return y if bias is None else add(y, bias)


def masked_attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with an additive mask over the last two axes.

    The mask is added to the logits before the softmax, so ``-inf`` entries
    receive exactly zero weight.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"non-finite values in attention input {name}")
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise ValueError(f"attention shape mismatch: Q {Q.shape}, K {K.shape}, V {V.shape}")
    d_k = Q.shape[-1]
    scores = matmul(Q, swapaxes(K, -1, -2)) * (1.0 / math.sqrt(d_k))
    if mask is not None:
        scores = add(scores, Tensor(mask))
    return matmul(softmax(scores, axis=-1), V)


def fft_magnitude(x: Tensor) -> Tensor:
    """Magnitude of the one-sided DFT along the last axis (length n//2 + 1)."""
    x = as_tensor(x)
    n = x.shape[-1]
    X = np.fft.rfft(x.data, axis=-1)
    mag = np.abs(X)

    def backward(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            unit = np.where(mag > 0, X / mag, 0.0)
        full = np.zeros(X.shape[:-1] + (n,), dtype=complex)
        full[..., : X.shape[-1]] = g * unit
        return (np.real(np.fft.ifft(full, axis=-1)) * n,)

    return make(mag, (x,), backward)


def sliding_windows(x: Tensor, width: int) -> Tensor:
    """Trailing windows along the time axis: ``(..., T, C) -> (..., T, C, width)``.

    Window ``t`` holds steps ``t - width + 1 .. t``; steps before the start are zero.
    """
    x = as_tensor(x)
    T = x.shape[-2]
    width_pad = [(0, 0)] * (x.ndim - 2) + [(width - 1, 0), (0, 0)]
    xp = np.pad(x.data, width_pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, width, axis=-2).copy()

    def backward(g):
        gxp = np.zeros_like(xp)
        for w in range(width):
            gxp[..., w : w + T, :] += g[..., w]
        return (gxp[..., width - 1 :, :],)

    return make(win, (x,), backward)


def gaussian_nll(y, mu: Tensor, sigma: Tensor, floor: float = 1e-6) -> Tensor:
    """Elementwise ``0.5*log(2*pi*sigma^2) + (y - mu)^2 / (2*sigma^2)``."""
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    s = np.maximum(sigma.data, floor)
    r = y.data - mu.data
    out = 0.5 * np.log(2.0 * np.pi * s * s) + r * r / (2.0 * s * s)

    def backward(g):
        dmu = -g * r / (s * s)
        ds = g * (1.0 / s - r * r / s**3) * (sigma.data >= floor)
        return -dmu, dmu, ds

    return make(out, (y, mu, sigma), backward)


def gru_sequence(x: Tensor, h0: Tensor, W: Tensor, U: Tensor, b: Tensor, bn: Tensor) -> Tensor:
    """Unroll a GRU over ``x`` of shape ``(B, T, F)``; returns states ``(B, T, H)``.

    Gate layout in ``W (F, 3H)``, ``U (H, 3H)``, ``b (3H,)`` is reset, update,
    candidate; ``bn (H,)`` is the hidden-side candidate bias applied inside the
    reset gate::

        r = sig(x W_r + h U_r + b_r)
        z = sig(x W_z + h U_z + b_z)
        n = tanh(x W_n + b_n + r * (h U_n + bn))
        h' = (1 - z) * n + z * h
    """
    x, h0, W, U, b, bn = (as_tensor(t) for t in (x, h0, W, U, b, bn))
    B, T, F = x.shape
    H = U.shape[0]
    if W.shape != (F, 3 * H) or U.shape != (H, 3 * H) or h0.shape != (B, H):
        raise ValueError(f"GRU shape mismatch: x {x.shape}, h0 {h0.shape}, W {W.shape}, U {U.shape}")
    Ud = U.data
    A = x.data @ W.data + b.data
    hs = np.empty((B, T + 1, H))
    hs[:, 0] = h0.data
    rs = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    cns = np.empty((B, T, H))
    h = h0.data
    for t in range(T):
        c = h @ Ud
        a = A[:, t]
        r = _sig(a[:, :H] + c[:, :H])
        z = _sig(a[:, H : 2 * H] + c[:, H : 2 * H])
        cn = c[:, 2 * H :] + bn.data
        n = np.tanh(a[:, 2 * H :] + r * cn)
        h = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], cns[:, t] = r, z, n, cn
        hs[:, t + 1] = h

    def backward(g):
        dA = np.empty((B, T, 3 * H))
        dU = np.zeros_like(Ud)
        dbn = np.zeros(H)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh = dh + g[:, t]
            r, z, n, cn, hp = rs[:, t], zs[:, t], ns[:, t], cns[:, t], hs[:, t]
            dn_pre = dh * (1.0 - z) * (1.0 - n * n)
            dz_pre = dh * (hp - n) * z * (1.0 - z)
            dr_pre = dn_pre * cn * r * (1.0 - r)
            dcn = dn_pre * r
            dA[:, t, :H] = dr_pre
            dA[:, t, H : 2 * H] = dz_pre
            dA[:, t, 2 * H :] = dn_pre
            dc = np.concatenate([dr_pre, dz_pre, dcn], axis=1)
            dU += hp.T @ dc
            dbn += dcn.sum(axis=0)
            dh = dh * z + dc @ Ud.T
        dx = dA @ W.data.T
        dW = x.data.reshape(-1, F).T @ dA.reshape(-1, 3 * H)
        db = dA.sum(axis=(0, 1))
        return dx, dh, dW, dU, db, dbn

    return make(hs[:, 1:].copy(), (x, h0, W, U, b, bn), backward)


def _sig(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
