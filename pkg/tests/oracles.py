"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np

from fsascale.diffcore import Tensor


def finite_difference(fn, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of scalar ``fn(*arrays)`` with respect to each array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = arr[idx]
            arr[idx] = old + h
            up = fn(*arrays)
            arr[idx] = old - h
            down = fn(*arrays)
            arr[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def gradcheck(build, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``build(*tensors)`` must return a scalar Tensor.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    work = [a.copy() for a in arrays]
    numeric = finite_difference(lambda *xs: build(*[Tensor(x) for x in xs]).item(), work, h)
    worst = 0.0
    for t, n in zip(tensors, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(n)
        scale = np.maximum(np.abs(a), np.abs(n))
        denom = np.maximum(scale, 1e-3)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def naive_dft_magnitude(x: np.ndarray) -> np.ndarray:
    n = len(x)
    t = np.arange(n)
    out = np.empty(n // 2 + 1)
    for j in range(n // 2 + 1):
        acc = 0j
        for tt in range(n):
            acc += x[tt] * np.exp(-2j * np.pi * j * t[tt] / n)
        out[j] = abs(acc)
    return out


def naive_causal_conv(x: np.ndarray, kernel: np.ndarray, dilation: int) -> np.ndarray:
    T, c_in = x.shape
    k, _, c_out = kernel.shape
    out = np.zeros((T, c_out))
    for t in range(T):
        for j in range(k):
            src = t - (k - 1 - j) * dilation
            if src < 0:
                continue
            for i in range(c_in):
                for o in range(c_out):
                    out[t, o] += x[src, i] * kernel[j, i, o]
    return out


def naive_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray, causal: bool) -> np.ndarray:
    n, d = Q.shape
    out = np.zeros((n, V.shape[1]))
    for t in range(n):
        limit = t + 1 if causal else K.shape[0]
        logits = [float(np.dot(Q[t], K[s])) / np.sqrt(d) for s in range(limit)]
        m = max(logits)
        w = [np.exp(v - m) for v in logits]
        tot = sum(w)
        for s in range(limit):
            out[t] += (w[s] / tot) * V[s]
    return out


def gru_reference(x: np.ndarray, h0: np.ndarray, W, U, b, bn) -> np.ndarray:
    """Step-by-step GRU with scalar sigmoid, one sequence at a time."""
    H = U.shape[0]
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))  # noqa: E731
    B, T, _ = x.shape
    out = np.zeros((B, T, H))
    for i in range(B):
        h = h0[i].copy()
        for t in range(T):
            a = x[i, t] @ W + b
            c = h @ U
            r = sig(a[:H] + c[:H])
            z = sig(a[H : 2 * H] + c[H : 2 * H])
            n = np.tanh(a[2 * H :] + r * (c[2 * H :] + bn))
            h = (1 - z) * n + z * h
            out[i, t] = h
    return out


def conjugate_linear_posterior(x: np.ndarray, y: np.ndarray, noise_std: float) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior of (w, b) for y = w x + b + N(0, noise^2) under a N(0, I) prior."""
    X = np.column_stack([x, np.ones_like(x)])
    prec = np.eye(2) + X.T @ X / noise_std**2
    cov = np.linalg.inv(prec)
    mean = cov @ X.T @ y / noise_std**2
    return mean, cov
