"""Volume rendering of color, depth and semantics, and the training loss.

All functions are vectorized over leading (ray) axes with samples on the
last axis. The loss weights each quadric group by ``eps0 / max(eps, eps0)``
so that unfitted rays have weight 1 and well-fitted ones at most 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import log_softmax, softmax

EPS0 = 1e-4


def interval_lengths(t, d_far: float) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, with the last interval running to ``d_far`` (never negative)."""
    t = np.asarray(t, dtype=np.float64)
    last = np.maximum(d_far - t[..., -1:], 0.0)
    return np.concatenate([np.diff(t, axis=-1), last], axis=-1)


def compute_weights(sigma, t, d_far: float = 10.0):
    """Return ``(w, alpha, trans)`` with w_i = alpha_i prod_{j<i} (1 - alpha_j)."""
    sigma = np.asarray(sigma, dtype=np.float64)
    tau = sigma * interval_lengths(t, d_far)
    alpha = -np.expm1(-tau)
    acc = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros(acc.shape[:-1] + (1,)), acc[..., :-1]], axis=-1))
    w = alpha * trans
    # the exact sum is 1 - T_{N+1} <= 1; rounding can overshoot by an ulp
    total = w.sum(axis=-1, keepdims=True)
    w = np.where(total > 1.0, w / np.where(total > 1.0, total, 1.0), w)
    while np.any(w.sum(axis=-1) > 1.0):
        over = w.sum(axis=-1, keepdims=True) > 1.0
        w = np.where(over, w * (1.0 - 2.0 ** -52), w)
    return w, alpha, trans


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    sem_probs: np.ndarray
    weights: np.ndarray
    opacity: np.ndarray
    sem_logits: Optional[np.ndarray] = None  # accumulated logits before the softmax


def render_ray(weights, rgb, t, sem_logits=None) -> RenderOutput:
    """Composite per-sample quantities with precomputed weights."""
    w = np.asarray(weights, dtype=np.float64)
    color = np.einsum("...n,...nc->...c", w, np.asarray(rgb, dtype=np.float64))
    depth = np.sum(w * np.asarray(t, dtype=np.float64), axis=-1)
    acc = probs = None
    if sem_logits is not None:
        acc = np.einsum("...n,...nc->...c", w, np.asarray(sem_logits, dtype=np.float64))
        probs = softmax(acc, axis=-1)
    return RenderOutput(color, depth, probs, w, w.sum(axis=-1), acc)


def volume_render(sigma, rgb, sem_logits, t, d_far: float = 10.0):
    """Full forward pass from densities; returns ``(RenderOutput, cache)``."""
    w, alpha, trans = compute_weights(sigma, t, d_far)
    out = render_ray(w, rgb, t, sem_logits)
    cache = (np.asarray(t, dtype=np.float64), interval_lengths(t, d_far), w, trans,
             np.asarray(rgb, dtype=np.float64), np.asarray(sem_logits, dtype=np.float64), np.asarray(sigma))
    return out, cache


def volume_render_backward(cache, d_color=None, d_depth=None, d_sem_acc=None):
    """Gradients w.r.t. (sigma, rgb, sem_logits) given gradients of the outputs.

    ``d_sem_acc`` is the gradient w.r.t. the accumulated logits (pre-softmax).
    """
    t, delta, w, trans, rgb, logits, sigma = cache
    g = np.zeros_like(w)
    d_rgb = np.zeros_like(rgb)
    d_logits = np.zeros_like(logits)
    if d_color is not None:
        g += np.einsum("...c,...nc->...n", d_color, rgb)
        d_rgb = w[..., None] * d_color[..., None, :]
    if d_depth is not None:
        g += d_depth[..., None] * t
    if d_sem_acc is not None:
        g += np.einsum("...c,...nc->...n", d_sem_acc, logits)
        d_logits = w[..., None] * d_sem_acc[..., None, :]
    # w_k = T_k - T_{k+1}: d w_k / d tau_k = T_{k+1}, d w_i / d tau_k = -w_i for i > k
    t_next = trans * np.exp(-sigma * delta)
    gw = g * w
    later = np.cumsum(gw[..., ::-1], axis=-1)[..., ::-1] - gw
    d_tau = g * t_next - later
    return d_tau * delta, d_rgb, d_logits


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.1
    lambda2: float = 0.05
    eps0: float = EPS0


@dataclass
class LossTerms:
    l_c: float
    l_d: float
    l_s: float
    total: float
    lambda1: float
    lambda2: float
    epsilon_used: np.ndarray


def effective_epsilon(eps, eps0: float = EPS0) -> np.ndarray:
    """max(eps, eps0); missing (NaN) or non-positive values map to eps0."""
    e = np.asarray(eps, dtype=np.float64)
    bad = ~np.isfinite(e) | (e <= 0)
    return np.where(bad, eps0, np.maximum(np.where(bad, eps0, e), eps0))


def _group_mean_weights(groups, valid, omega):
    """Per-ray coefficient so that sum(coef * r) = mean over groups of omega * group-mean(r)."""
    coef = np.zeros(len(groups))
    ids = np.unique(groups[valid])
    if len(ids) == 0:
        return coef
    counts = np.bincount(groups[valid], minlength=groups.max() + 1)
    coef[valid] = omega[valid] / (counts[groups[valid]] * len(ids))
    return coef


def compute_loss(out: RenderOutput, gt_color, gt_depth, gt_semantic, epsilon, groups,
                 cfg: LossConfig = LossConfig()):
    """Fitting-error-weighted loss and its gradients w.r.t. the render outputs.

    Returns ``(LossTerms, d_color, d_depth, d_sem_acc)``. Color and depth
    residuals are L1 (summed over channels), averaged within each quadric
    group and then across groups; rays with ``gt_depth == 0`` do not enter
    the depth term. The semantic term is the mean cross-entropy.
    """
    gt_color = np.asarray(gt_color, dtype=np.float64)
    gt_depth = np.asarray(gt_depth, dtype=np.float64)
    labels = np.asarray(gt_semantic, dtype=np.int64)
    groups = np.asarray(groups, dtype=np.int64)
    n = len(groups)
    eps_used = effective_epsilon(epsilon, cfg.eps0)
    omega = cfg.eps0 / eps_used

    diff_c = out.color - gt_color
    coef_c = _group_mean_weights(groups, np.ones(n, dtype=bool), omega)
    l_c = float(np.sum(coef_c * np.abs(diff_c).sum(axis=-1)))
    d_color = coef_c[:, None] * np.sign(diff_c)

    valid_d = gt_depth > 0
    diff_d = out.depth - gt_depth
    coef_d = _group_mean_weights(groups, valid_d, omega)
    l_d = float(np.sum(coef_d * np.abs(diff_d)))
    d_depth = coef_d * np.sign(diff_d)

    if n:
        logp = log_softmax(out.sem_logits, axis=-1)
        l_s = float(-np.mean(logp[np.arange(n), labels]))
        d_sem = softmax(out.sem_logits, axis=-1)
        d_sem[np.arange(n), labels] -= 1.0
        d_sem /= n
    else:
        l_s = 0.0
        d_sem = np.zeros_like(out.sem_logits)

    total = l_c + cfg.lambda1 * l_d + cfg.lambda2 * l_s
    terms = LossTerms(l_c, l_d, l_s, total, cfg.lambda1, cfg.lambda2, eps_used)
    return terms, d_color, cfg.lambda1 * d_depth, cfg.lambda2 * d_sem
