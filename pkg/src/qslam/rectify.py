"""Per-segment depth correction by projecting depths onto fitted quadrics."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitFailedError, UnderdeterminedError
from .geometry import CameraIntrinsics, Frame, backproject_segment
from .quadric import (
    MIN_FIT_POINTS,
    GateConfig,
    QuadricCoefficients,
    QuadricFitResult,
    fit_quadric,
    passes_fit_gates,
    refine_quadric,
)

logger = logging.getLogger(__name__)

FIXED_XY = "fixed-xy"
RAY = "ray"
COEF_FLOOR = 1e-12


@dataclass(frozen=True)
class RectifyConfig:
    gate: GateConfig = field(default_factory=GateConfig)
    mode: str = FIXED_XY
    max_rel_change: float = 0.2
    min_points: int = MIN_FIT_POINTS
    # polish the eigen-solution on the Taubin distance before gating
    refine: bool = True

    def __post_init__(self):
        if self.mode not in (FIXED_XY, RAY):
            raise ValueError(f"unknown substitution mode {self.mode!r}; use {FIXED_XY!r} or {RAY!r}")


@dataclass
class RectifiedFrame:
    corrected_depth: np.ndarray
    correction_mask: np.ndarray
    fits: list[QuadricFitResult]


def depth_polynomial(coeffs: QuadricCoefficients, u, v, k: CameraIntrinsics, d0, mode: str = FIXED_XY):
    """Coefficients (A, B, C0) of A z^2 + B z + C0 = 0 for each pixel."""
    cq, cl, c = coeffs.cq, coeffs.cl, coeffs.c
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    rx = (u - k.cx) / k.fx
    ry = (v - k.cy) / k.fy
    if mode == FIXED_XY:
        X = np.asarray(d0, dtype=np.float64) * rx
        Y = np.asarray(d0, dtype=np.float64) * ry
        A = np.full_like(X, cq[2])
        B = cq[4] * Y + cq[5] * X + cl[2]
        C0 = cq[0] * X * X + cq[1] * Y * Y + cq[3] * X * Y + cl[0] * X + cl[1] * Y - c
    elif mode == RAY:
        A = cq[0] * rx * rx + cq[1] * ry * ry + cq[2] + cq[3] * rx * ry + cq[4] * ry + cq[5] * rx
        B = cl[0] * rx + cl[1] * ry + cl[2]
        C0 = np.full_like(A, -c)
    else:
        raise ValueError(f"unknown substitution mode {mode!r}")
    return A, B, C0


def nearest_root(A, B, C0, d0, max_rel_change: float = 0.2):
    """Real root of A z^2 + B z + C0 nearest to ``d0``; falls back to ``d0``.

    Returns ``(z, solved)`` arrays; ``solved`` is False wherever the
    fallback was used.
    """
    A, B, C0, d0 = np.broadcast_arrays(*(np.asarray(a, dtype=np.float64) for a in (A, B, C0, d0)))
    z = d0.copy()
    solved = np.zeros(d0.shape, dtype=bool)

    lin = np.abs(A) < COEF_FLOOR
    lin_ok = lin & (np.abs(B) >= COEF_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        z_lin = np.where(lin_ok, -C0 / np.where(lin_ok, B, 1.0), np.nan)

    quad = ~lin
    disc = B * B - 4.0 * A * C0
    # rounding can push an exact double root slightly below zero
    tiny = 1e-12 * (B * B + np.abs(4.0 * A * C0))
    disc = np.where((disc < 0) & (disc > -tiny), 0.0, disc)
    quad_ok = quad & (disc >= 0)
    sq = np.sqrt(np.where(quad_ok, disc, 0.0))
    sgn = np.where(B >= 0, 1.0, -1.0)
    qv = -0.5 * (B + sgn * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(quad_ok, qv / np.where(quad_ok, A, 1.0), np.nan)
        r2 = np.where(quad_ok & (qv != 0), C0 / np.where(qv != 0, qv, 1.0), r1)
    pick = np.where(np.abs(r1 - d0) <= np.abs(r2 - d0), r1, r2)
    cand = np.where(lin_ok, z_lin, np.where(quad_ok, pick, np.nan))

    good = np.isfinite(cand) & (cand > 0) & (np.abs(cand - d0) <= max_rel_change * d0)
    z[good] = cand[good]
    solved[good] = True
    return z, solved


def solve_depth(coeffs: QuadricCoefficients, u: float, v: float, k: CameraIntrinsics, d0: float,
                mode: str = FIXED_XY, max_rel_change: float = 0.2) -> float:
    A, B, C0 = depth_polynomial(coeffs, u, v, k, d0, mode)
    z, _ = nearest_root(A, B, C0, d0, max_rel_change)
    return float(z)


def coefficient_of_determination(predicted, corrected) -> float:
    z = np.asarray(predicted, dtype=np.float64)
    f = np.asarray(corrected, dtype=np.float64)
    ss_res = float(np.sum((z - f) ** 2))
    ss_tot = float(np.sum((z - z.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


def rectify_segment(frame: Frame, segment_id: int, fit: QuadricFitResult,
                    cfg: RectifyConfig = RectifyConfig()):
    """Correct the depths of one segment.

    Returns ``(rows, cols, depths, solved, r2)`` over the segment's valid pixels.
    """
    sel = (frame.mask == segment_id) & (frame.depth > 0)
    v, u = np.nonzero(sel)
    d0 = frame.depth[v, u]
    A, B, C0 = depth_polynomial(fit.coeffs, u, v, frame.intrinsics, d0, cfg.mode)
    z, solved = nearest_root(A, B, C0, d0, cfg.max_rel_change)
    r2 = coefficient_of_determination(d0, z)
    return v, u, z, solved, r2


def _failed_fit(segment_id: int, n: int, frame_id: int) -> QuadricFitResult:
    return QuadricFitResult(
        coeffs=QuadricCoefficients(np.zeros(6), np.zeros(3), 0.0),
        epsilon=math.nan,
        n_points=n,
        min_eigenvalue=math.nan,
        segment_id=segment_id,
        frame_id=frame_id,
    )


def rectify_frame(frame: Frame, cfg: RectifyConfig = RectifyConfig()) -> RectifiedFrame:
    depth = np.array(frame.depth, copy=True)
    corrected = np.zeros(depth.shape, dtype=bool)
    fits = []
    for sid in frame.segment_ids():
        cloud = backproject_segment(frame, sid)
        try:
            fit = fit_quadric(cloud, segment_id=sid, min_points=cfg.min_points)
        except (UnderdeterminedError, FitFailedError) as exc:
            logger.debug("frame %d segment %d not fitted: %s", frame.frame_id, sid, exc)
            fits.append(_failed_fit(sid, len(cloud), frame.frame_id))
            continue
        fit = fit.replace(frame_id=frame.frame_id)
        if cfg.refine and len(cloud) >= cfg.gate.area_min:
            fit = refine_quadric(fit, cloud)
        if not passes_fit_gates(fit, cfg.gate):
            fits.append(fit)
            continue
        v, u, z, solved, r2 = rectify_segment(frame, sid, fit, cfg)
        keep = r2 >= cfg.gate.r2_min
        fits.append(fit.replace(r2=r2, accepted=bool(keep)))
        if keep:
            depth[v[solved], u[solved]] = z[solved]
            corrected[v[solved], u[solved]] = True
    return RectifiedFrame(depth, corrected, fits)


def accepted_fits(fits) -> dict[int, QuadricFitResult]:
    return {f.segment_id: f for f in fits if f.accepted}
