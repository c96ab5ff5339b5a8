"""Trajectory, image and mesh evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import ContractViolation, MetricUndefinedError
from .geometry import Pose

PSNR_CAP = 99.0


# ---------------------------------------------------------------------------
# trajectories


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False):
    """Least-squares (s, R, t) minimizing ||dst - (s R src + t)||.

    Raises MetricUndefinedError when ``src`` has no spread.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.mean(np.sum(xs * xs, axis=1))
    if var_s <= 1e-24:
        raise MetricUndefinedError("trajectory alignment undefined: all estimated positions coincide")
    cov = xd.T @ xs / len(src)
    U, S, Vt = np.linalg.svd(cov)
    E = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        E[2, 2] = -1.0
    R = U @ E @ Vt
    s = float(np.trace(np.diag(S) @ E) / var_s) if with_scale else 1.0
    t = mu_d - s * R @ mu_s
    return s, R, t


PoseSeq = Union[Sequence[Pose], Mapping[int, Pose]]


def _as_mapping(poses: PoseSeq) -> dict:
    return dict(poses) if isinstance(poses, Mapping) else dict(enumerate(poses))


@dataclass
class TrajectoryPair:
    estimated: dict
    ground_truth: dict

    def __init__(self, estimated: PoseSeq, ground_truth: PoseSeq):
        self.estimated = _as_mapping(estimated)
        self.ground_truth = _as_mapping(ground_truth)

    def matched(self):
        ids = sorted(set(self.estimated) & set(self.ground_truth))
        if len(ids) < 2:
            raise MetricUndefinedError(f"need at least 2 matching frame ids, got {len(ids)}")
        est = np.array([self.estimated[i].translation for i in ids])
        gt = np.array([self.ground_truth[i].translation for i in ids])
        return ids, est, gt


def ate_rmse(pair: TrajectoryPair, align_mode: str = "se3") -> float:
    """RMSE (cm) of translation residuals after aligning estimate to ground truth."""
    if align_mode not in ("se3", "sim3"):
        raise ValueError(f"align_mode must be 'se3' or 'sim3', got {align_mode!r}")
    _, est, gt = pair.matched()
    s, R, t = umeyama(est, gt, with_scale=align_mode == "sim3")
    resid = gt - (s * est @ R.T + t)
    return 100.0 * float(np.sqrt(np.mean(np.sum(resid * resid, axis=1))))


# ---------------------------------------------------------------------------
# images


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"image sizes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr_from_mse(mse: float) -> float:
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def psnr(rendered, gt) -> float:
    a, b = _check_same(rendered, gt)
    return psnr_from_mse(float(np.mean((a - b) ** 2)))


def ssim(rendered, gt) -> float:
    """Mean SSIM, 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, data range 1."""
    from skimage.metrics import structural_similarity

    a, b = _check_same(rendered, gt)
    return float(structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                       use_sample_covariance=False,
                                       channel_axis=-1 if a.ndim == 3 else None))


def depth_l1(rendered, gt) -> float:
    """Mean |difference| (cm) over pixels valid (> 0) in both maps."""
    a, b = _check_same(rendered, gt)
    ok = (a > 0) & (b > 0)
    if not np.any(ok):
        raise MetricUndefinedError("no jointly valid depth pixels")
    return 100.0 * float(np.mean(np.abs(a[ok] - b[ok])))


def image_metrics(rendered_rgb, gt_rgb, rendered_depth, gt_depth) -> dict:
    return {"psnr": psnr(rendered_rgb, gt_rgb), "ssim": ssim(rendered_rgb, gt_rgb),
            "depth_l1_cm": depth_l1(rendered_depth, gt_depth)}


# ---------------------------------------------------------------------------
# meshes


def sample_surface(vertices, triangles, n: int, seed: int = 0) -> np.ndarray:
    """``n`` points uniformly distributed over the surface (area weighted)."""
    V = np.asarray(vertices, dtype=np.float64)
    T = np.asarray(triangles, dtype=np.int64)
    if len(T) == 0:
        raise MetricUndefinedError("cannot sample an empty mesh")
    a, b, c = V[T[:, 0]], V[T[:, 1]], V[T[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(T), size=n, p=area / area.sum())
    r1, r2 = rng.uniform(size=(2, n))
    s = np.sqrt(r1)
    return (1 - s)[:, None] * a[idx] + (s * (1 - r2))[:, None] * b[idx] + (s * r2)[:, None] * c[idx]


def mesh_metrics(recon, gt, n_samples: int = 100_000, threshold: float = 0.05, seed: int = 0) -> dict:
    """Accuracy / completion (cm) and completion ratio (%) between two meshes.

    Meshes are anything with ``vertices`` and ``triangles`` attributes.
    """
    from scipy.spatial import cKDTree

    if len(recon.triangles) == 0 or len(gt.triangles) == 0:
        raise MetricUndefinedError("mesh metrics need two non-empty meshes")
    pr = sample_surface(recon.vertices, recon.triangles, n_samples, seed)
    pg = sample_surface(gt.vertices, gt.triangles, n_samples, seed)
    acc = cKDTree(pg).query(pr)[0]
    comp = cKDTree(pr).query(pg)[0]
    return {
        "accuracy_cm": 100.0 * float(np.mean(acc)),
        "completion_cm": 100.0 * float(np.mean(comp)),
        "completion_ratio_pct": 100.0 * float(np.mean(comp < threshold)),
    }
