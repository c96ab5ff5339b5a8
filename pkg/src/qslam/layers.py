"""Differentiable building blocks with hand-written reverse passes.

Each ``*_forward`` returns its output and a cache; the matching
``*_backward`` takes the upstream gradient and that cache. Leading axes are
treated as batch axes throughout.
"""

from __future__ import annotations

import numpy as np


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    # the tanh form stays finite for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def positional_encoding(x, bands: int) -> np.ndarray:
    """Interleaved (sin 2^k pi x, cos 2^k pi x), k = 0..bands-1, per input channel.

    Scalar/1-D input gives a ``2*bands`` vector; an array of shape (..., c)
    gives (..., c*2*bands).
    """
    x = np.asarray(x, dtype=np.float64)
    scalar = x.ndim == 0
    if scalar:
        x = x[None]
    freq = (2.0 ** np.arange(bands)) * np.pi
    ang = x[..., None] * freq  # (..., c, bands)
    out = np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(x.shape[:-1] + (-1,))
    return out


def positional_encoding_backward(x, bands: int, grad) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    freq = (2.0 ** np.arange(bands)) * np.pi
    ang = x[..., None] * freq
    g = grad.reshape(x.shape + (bands, 2))
    return np.sum(g[..., 0] * np.cos(ang) * freq - g[..., 1] * np.sin(ang) * freq, axis=-1)


def fit_width(x: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad or truncate the last axis to ``width``."""
    c = x.shape[-1]
    if c >= width:
        return x[..., :width]
    pad = np.zeros(x.shape[:-1] + (width - c,))
    return np.concatenate([x, pad], axis=-1)


def linear_forward(x, W, b=None):
    y = x @ W
    if b is not None:
        y = y + b
    return y


def linear_backward(dy, x, W, has_bias=True):
    """Return (dx, dW, db)."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    return dy @ W.T, dW, db


def softmax_masked(S, allowed=None):
    """Row softmax over the last axis; rows with no allowed entry become zero."""
    if allowed is not None:
        S = np.where(allowed, S, -np.inf)
    m = np.max(S, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    E = np.exp(S - m)
    if allowed is not None:
        E = np.where(allowed, E, 0.0)
    Z = E.sum(axis=-1, keepdims=True)
    return E / np.where(Z > 0, Z, 1.0)


def _split(x, h):
    *lead, t, d = x.shape
    return np.swapaxes(x.reshape(*lead, t, h, d // h), -2, -3)


def _merge(x):
    x = np.swapaxes(x, -2, -3)
    *lead, t, h, dh = x.shape
    return x.reshape(*lead, t, h * dh)


def mha_forward(X, Wq, Wk, Wv, Wo, n_heads: int, allowed=None):
    """Multi-head self-attention over axis -2 of ``X`` (..., T, D).

    ``allowed`` is an optional boolean (..., T, T) key mask shared by all heads.
    Returns ``(O, cache)`` where ``O = concat_h(A_h V_h) Wo`` (no residual).
    """
    dh = X.shape[-1] // n_heads
    Qh, Kh, Vh = (_split(X @ W, n_heads) for W in (Wq, Wk, Wv))
    S = Qh @ np.swapaxes(Kh, -1, -2) / np.sqrt(dh)
    A = softmax_masked(S, None if allowed is None else allowed[..., None, :, :])
    merged = _merge(A @ Vh)
    cache = (X, Qh, Kh, Vh, A, merged, Wq, Wk, Wv, Wo, n_heads)
    return merged @ Wo, cache


def mha_backward(dO, cache):
    """Return (dX, dWq, dWk, dWv, dWo)."""
    X, Qh, Kh, Vh, A, merged, Wq, Wk, Wv, Wo, h = cache
    dh = X.shape[-1] // h
    D = X.shape[-1]
    dWo = merged.reshape(-1, D).T @ dO.reshape(-1, D)
    dOh = _split(dO @ Wo.T, h)
    dA = dOh @ np.swapaxes(Vh, -1, -2)
    dVh = np.swapaxes(A, -1, -2) @ dOh
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True)) / np.sqrt(dh)
    dQh = dS @ Kh
    dKh = np.swapaxes(dS, -1, -2) @ Qh
    X2 = X.reshape(-1, D)
    dQ, dK, dV = (_merge(g) for g in (dQh, dKh, dVh))
    dWq = X2.T @ dQ.reshape(-1, D)
    dWk = X2.T @ dK.reshape(-1, D)
    dWv = X2.T @ dV.reshape(-1, D)
    dX = dQ @ Wq.T + dK @ Wk.T + dV @ Wv.T
    return dX, dWq, dWk, dWv, dWo
