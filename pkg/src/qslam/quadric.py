"""Least-squares quadric fitting of point clouds.

A quadric is the zero set of ``f(x) = cq . q(x) + cl . x - c`` with
``q(x) = (x^2, y^2, z^2, xy, yz, xz)``. The fit eliminates ``c`` and ``cl``
in closed form, leaving a 6x6 symmetric eigenproblem for ``cq``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FitFailedError, UnderdeterminedError
from .geometry import PointCloud

MIN_FIT_POINTS = 10
GRAD_FLOOR = 1e-12
PINV_RTOL = 1e-10
TAUBIN_SENTINEL = 1e6


@dataclass(frozen=True)
class QuadricCoefficients:
    cq: np.ndarray
    cl: np.ndarray
    c: float

    def __post_init__(self):
        object.__setattr__(self, "cq", np.asarray(self.cq, dtype=np.float64).reshape(6))
        object.__setattr__(self, "cl", np.asarray(self.cl, dtype=np.float64).reshape(3))
        object.__setattr__(self, "c", float(self.c))

    @classmethod
    def from_vector(cls, v) -> "QuadricCoefficients":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:6], v[6:9], v[9])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.cq, self.cl, [self.c]])

    def scaled(self, s: float) -> "QuadricCoefficients":
        return QuadricCoefficients(self.cq * s, self.cl * s, self.c * s)

    def canonical(self) -> "QuadricCoefficients":
        """Rescale to unit ``cq`` with the first significant entry positive."""
        n = np.linalg.norm(self.cq)
        if n == 0:
            raise ValueError("quadratic part is identically zero")
        out = self.scaled(1.0 / n)
        nz = np.flatnonzero(np.abs(out.cq) > 1e-9)
        if len(nz) and out.cq[nz[0]] < 0:
            out = out.scaled(-1.0)
        return out

    def hessian_half(self) -> np.ndarray:
        """Symmetric A with ``cq . q(x) == x^T A x``."""
        a1, a2, a3, a4, a5, a6 = self.cq
        return np.array([[a1, a4 / 2, a6 / 2], [a4 / 2, a2, a5 / 2], [a6 / 2, a5 / 2, a3]])

    def matrix4(self) -> np.ndarray:
        """Symmetric Q with ``f(x) = [x, 1]^T Q [x, 1]``."""
        Q = np.zeros((4, 4))
        Q[:3, :3] = self.hessian_half()
        Q[:3, 3] = Q[3, :3] = self.cl / 2
        Q[3, 3] = -self.c
        return Q

    @classmethod
    def from_matrix4(cls, Q) -> "QuadricCoefficients":
        Q = 0.5 * (np.asarray(Q, dtype=np.float64) + np.asarray(Q, dtype=np.float64).T)
        cq = [Q[0, 0], Q[1, 1], Q[2, 2], 2 * Q[0, 1], 2 * Q[1, 2], 2 * Q[0, 2]]
        return cls(cq, 2 * Q[:3, 3], -Q[3, 3])

    def transformed(self, T) -> "QuadricCoefficients":
        """Coefficients of ``g(x) = f(T x)`` for a 4x4 affine ``T``.

        With ``T`` a camera-to-world matrix this maps a world-frame surface
        into the camera frame.
        """
        T = np.asarray(T, dtype=np.float64)
        return QuadricCoefficients.from_matrix4(T.T @ self.matrix4() @ T)


def quadric_term(x) -> np.ndarray:
    """Quadratic monomials (x^2, y^2, z^2, xy, yz, xz), vectorized over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([X * X, Y * Y, Z * Z, X * Y, Y * Z, X * Z], axis=-1)


def evaluate_quadric(coeffs: QuadricCoefficients, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return quadric_term(x) @ coeffs.cq + x @ coeffs.cl - coeffs.c


def quadric_gradient(coeffs: QuadricCoefficients, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    a = coeffs.cq
    X, Y, Z = x[..., 0], x[..., 1], x[..., 2]
    gx = 2 * a[0] * X + a[3] * Y + a[5] * Z + coeffs.cl[0]
    gy = 2 * a[1] * Y + a[3] * X + a[4] * Z + coeffs.cl[1]
    gz = 2 * a[2] * Z + a[4] * Y + a[5] * X + coeffs.cl[2]
    return np.stack([gx, gy, gz], axis=-1)


def taubin_distance(coeffs: QuadricCoefficients, x, sentinel: float = TAUBIN_SENTINEL):
    """First-order squared distance f^2 / |grad f|^2 (meters^2).

    Where the gradient vanishes the surface is singular and ``sentinel`` is
    returned instead.
    """
    f = evaluate_quadric(coeffs, x)
    g2 = np.sum(quadric_gradient(coeffs, x) ** 2, axis=-1)
    safe = g2 >= GRAD_FLOOR
    out = np.where(safe, f * f / np.where(safe, g2, 1.0), sentinel)
    return float(out) if out.ndim == 0 else out


def fitting_error(coeffs: QuadricCoefficients, points) -> float:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        raise ValueError("fitting error of an empty cloud is undefined")
    return float(np.mean(taubin_distance(coeffs, pts)))


@dataclass(frozen=True)
class ScatterSummary:
    l_mat: np.ndarray
    m_mat: np.ndarray
    n_mat: np.ndarray
    q_bar: np.ndarray
    x_bar: np.ndarray


def compute_scatter(points, min_points: int = MIN_FIT_POINTS) -> ScatterSummary:
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    if len(pts) < min_points:
        raise UnderdeterminedError(f"need at least {min_points} points, got {len(pts)}")
    q = quadric_term(pts)
    x_bar = pts.mean(axis=0)
    q_bar = q.mean(axis=0)
    dx = pts - x_bar
    dq = q - q_bar
    L = dx.T @ dx
    M = dq.T @ dq
    N = -(dq.T @ dx)
    return ScatterSummary(0.5 * (L + L.T), 0.5 * (M + M.T), N, q_bar, x_bar)


def sym_pinv(A: np.ndarray, rtol: float = PINV_RTOL) -> np.ndarray:
    w, V = np.linalg.eigh(A)
    top = np.max(np.abs(w)) if len(w) else 0.0
    keep = np.abs(w) > rtol * top
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    return (V * inv) @ V.T


def reduced_scatter(s: ScatterSummary, rtol: float = PINV_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Return (Psi, pinv(L)) with Psi = M - N pinv(L) N^T."""
    L_inv = sym_pinv(s.l_mat, rtol)
    psi = s.m_mat - s.n_mat @ L_inv @ s.n_mat.T
    return 0.5 * (psi + psi.T), L_inv


@dataclass
class QuadricFitResult:
    coeffs: QuadricCoefficients
    epsilon: float
    n_points: int
    min_eigenvalue: float
    segment_id: int = 0
    r2: float = math.nan
    accepted: bool = False
    frame_id: int = -1
    refined: bool = False

    def replace(self, **kw) -> "QuadricFitResult":
        return dataclasses.replace(self, **kw)

    def to_record(self) -> dict:
        def num(v):
            return None if v is None or not math.isfinite(v) else float(v)

        return {
            "frame": int(self.frame_id),
            "segment_id": int(self.segment_id),
            "cq": [float(v) for v in self.coeffs.cq],
            "cl": [float(v) for v in self.coeffs.cl],
            "c": float(self.coeffs.c),
            "epsilon": num(self.epsilon),
            "r2": num(self.r2),
            "n_points": int(self.n_points),
            "accepted": bool(self.accepted),
            "min_eigenvalue": num(self.min_eigenvalue),
            "refined": bool(self.refined),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "QuadricFitResult":
        def num(v):
            return math.nan if v is None else float(v)

        return cls(
            coeffs=QuadricCoefficients(rec["cq"], rec["cl"], rec["c"]),
            epsilon=num(rec["epsilon"]),
            n_points=int(rec["n_points"]),
            min_eigenvalue=num(rec.get("min_eigenvalue")),
            segment_id=int(rec["segment_id"]),
            r2=num(rec.get("r2")),
            accepted=bool(rec["accepted"]),
            frame_id=int(rec.get("frame", -1)),
            refined=bool(rec.get("refined", False)),
        )


def fit_quadric(points, segment_id: int = 0, min_points: int = MIN_FIT_POINTS,
                pinv_rtol: float = PINV_RTOL) -> QuadricFitResult:
    """Fit a quadric to ``points`` minimizing the algebraic residual under ``|cq| = 1``.

    Raises UnderdeterminedError below ``min_points`` and FitFailedError if the
    eigensolver does not converge.
    """
    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    s = compute_scatter(pts, min_points)
    psi, L_inv = reduced_scatter(s, pinv_rtol)
    try:
        w, V = np.linalg.eigh(psi)
    except np.linalg.LinAlgError as exc:
        raise FitFailedError(f"eigen-solve failed for segment {segment_id}: {exc}") from exc
    if not np.all(np.isfinite(w)):
        raise FitFailedError(f"non-finite eigenvalues for segment {segment_id}")
    cq = V[:, 0] / np.linalg.norm(V[:, 0])
    nz = np.flatnonzero(np.abs(cq) > 1e-9)
    if len(nz) and cq[nz[0]] < 0:
        cq = -cq
    cl = L_inv @ (s.n_mat.T @ cq)
    c = cq @ s.q_bar + cl @ s.x_bar
    coeffs = QuadricCoefficients(cq, cl, c)
    return QuadricFitResult(
        coeffs=coeffs,
        epsilon=fitting_error(coeffs, pts),
        n_points=len(pts),
        min_eigenvalue=float(w[0]),
        segment_id=segment_id,
    )


def heightfield_init(points) -> QuadricCoefficients:
    """Paraboloid h = quadratic(a, b) fitted in the patch's principal frame.

    Linear least squares, so it cannot wander off to a degenerate surface;
    used as a second starting point for :func:`refine_quadric`.
    """
    pts = np.asarray(points, dtype=np.float64)
    m = pts.mean(axis=0)
    _, V = np.linalg.eigh(np.cov((pts - m).T))
    R = V[:, ::-1].copy()  # columns: major, minor, normal
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    a, b, h = ((pts - m) @ R).T
    design = np.stack([a * a, b * b, a * b, a, b, np.ones_like(a)], axis=1)
    s = np.linalg.lstsq(design, h, rcond=None)[0]
    local = QuadricCoefficients([s[0], s[1], 0, s[2], 0, 0], [s[3], s[4], -1.0], -s[5])
    to_local = np.eye(4)
    to_local[:3, :3] = R.T
    to_local[:3, 3] = -R.T @ m
    return local.transformed(to_local).canonical()


def _sampson_residuals(v, q, pts):
    cq, cl, c = v[:6], v[6:9], v[9]
    f = q @ cq + pts @ cl - c
    g = quadric_gradient(QuadricCoefficients(cq, cl, c), pts)
    return f / np.maximum(np.linalg.norm(g, axis=1), 1e-6)


def refine_quadric(fit: QuadricFitResult, points, max_nfev: int = 3000) -> QuadricFitResult:
    """Polish a fit by minimizing the mean Taubin distance directly.

    The unit-norm eigen-solution is biased on noisy partial patches; this
    runs Levenberg-Marquardt on the Sampson residuals ``f / |grad f|`` from
    the eigen-solution and from :func:`heightfield_init`, and keeps the
    lowest fitting error (the input fit included).
    """
    from scipy.optimize import least_squares

    pts = points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=np.float64)
    q = quadric_term(pts)
    best_coeffs, best_eps = fit.coeffs, fit.epsilon
    for start in (fit.coeffs, heightfield_init(pts)):
        v0 = start.as_vector() / np.linalg.norm(start.as_vector())
        sol = least_squares(_sampson_residuals, v0, args=(q, pts), method="lm",
                            x_scale="jac", max_nfev=max_nfev)
        if not np.all(np.isfinite(sol.x)) or np.linalg.norm(sol.x[:6]) == 0:
            continue
        cand = QuadricCoefficients.from_vector(sol.x).canonical()
        eps = fitting_error(cand, pts)
        if eps < best_eps:
            best_coeffs, best_eps = cand, eps
    return fit.replace(coeffs=best_coeffs, epsilon=best_eps, refined=True)


@dataclass(frozen=True)
class GateConfig:
    area_min: int = 200
    tau_eps: float = 1e-4
    r2_min: float = 0.85


def passes_fit_gates(fit: QuadricFitResult, cfg: GateConfig = GateConfig()) -> bool:
    """Area and fitting-error gates applied before depth correction."""
    return fit.n_points >= cfg.area_min and fit.epsilon <= cfg.tau_eps


def accept_segment(fit: QuadricFitResult, cfg: GateConfig = GateConfig()) -> bool:
    return passes_fit_gates(fit, cfg) and fit.r2 >= cfg.r2_min


def write_fit_records(path, fits) -> None:
    with open(path, "w") as fh:
        for fit in fits:
            fh.write(json.dumps(fit.to_record(), sort_keys=True) + "\n")


def read_fit_records(path) -> list[QuadricFitResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(QuadricFitResult.from_record(json.loads(line)))
    return out
