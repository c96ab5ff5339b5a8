"""Synthetic scenes made of bounded analytic quadrics.

Scenes are rendered by exact ray/quadric intersection and serve as the
ground truth for every other stage. Noise injection is seeded through
counter-based Philox streams keyed on (seed, frame id, purpose).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, InvalidInputError
from .geometry import CameraIntrinsics, Frame, Pose, axis_angle_to_quat, matrix_to_quat
from .quadric import QuadricCoefficients

T_MIN = 1e-9
DISC_SNAP = 1e-12
BOX_TOL = 1e-9

_STREAM_DEPTH = 1
_STREAM_POSE = 2


@dataclass(frozen=True)
class QuadricPrimitive:
    coeffs: QuadricCoefficients
    color: np.ndarray
    semantic_id: int
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "color", np.asarray(self.color, dtype=np.float64).reshape(3))
        object.__setattr__(self, "bbox_min", np.asarray(self.bbox_min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "bbox_max", np.asarray(self.bbox_max, dtype=np.float64).reshape(3))
        if self.semantic_id < 1:
            raise InvalidInputError(f"semantic id must be >= 1, got {self.semantic_id}")
        if np.any(self.bbox_max <= self.bbox_min):
            raise InvalidInputError(f"primitive {self.name or self.semantic_id}: empty bounding box")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "semantic_id": int(self.semantic_id),
            "cq": self.coeffs.cq.tolist(),
            "cl": self.coeffs.cl.tolist(),
            "c": float(self.coeffs.c),
            "color": self.color.tolist(),
            "bbox_min": self.bbox_min.tolist(),
            "bbox_max": self.bbox_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuadricPrimitive":
        return cls(QuadricCoefficients(d["cq"], d["cl"], d["c"]), d["color"], int(d["semantic_id"]),
                   d["bbox_min"], d["bbox_max"], d.get("name", ""))


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0
    edge_blur_px: int = 0
    pose_rot_sigma: float = 0.0
    pose_trans_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if min(self.depth_sigma, self.edge_blur_px, self.pose_rot_sigma, self.pose_trans_sigma) < 0:
            raise InvalidInputError("noise magnitudes must be non-negative")


@dataclass
class SyntheticScene:
    primitives: list[QuadricPrimitive]
    intrinsics: Optional[CameraIntrinsics] = None
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.semantic_id for p in self.primitives]
        if len(ids) != len(set(ids)):
            raise InvalidInputError(f"semantic ids must be unique, got {ids}")

    def by_id(self, semantic_id: int) -> QuadricPrimitive:
        for p in self.primitives:
            if p.semantic_id == semantic_id:
                return p
        raise KeyError(semantic_id)

    def to_dict(self) -> dict:
        out = {"primitives": [p.to_dict() for p in self.primitives]}
        if self.intrinsics is not None:
            k = self.intrinsics
            out["camera"] = {"fx": k.fx, "fy": k.fy, "cx": k.cx, "cy": k.cy,
                             "width": k.width, "height": k.height}
        if self.poses:
            out["poses"] = [list(p.translation) + list(p.rotation) for p in self.poses]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        try:
            prims = [QuadricPrimitive.from_dict(p) for p in d["primitives"]]
            k = None
            if "camera" in d:
                c = d["camera"]
                k = CameraIntrinsics(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                                     int(c["width"]), int(c["height"]))
            poses = [Pose.from_quat(p[3:7], p[0:3]) for p in d.get("poses", [])]
        except (KeyError, TypeError, IndexError) as exc:
            raise DataError(f"malformed scene description: missing or bad field {exc}") from exc
        return cls(prims, k, poses)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SyntheticScene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# primitive constructors


def plane(normal, offset: float) -> QuadricCoefficients:
    """Linear form n . x = offset (zero quadratic part)."""
    return QuadricCoefficients(np.zeros(6), np.asarray(normal, dtype=np.float64), offset)


def sphere(center, radius: float) -> QuadricCoefficients:
    return ellipsoid(center, (radius, radius, radius))


def ellipsoid(center, radii) -> QuadricCoefficients:
    c = np.asarray(center, dtype=np.float64)
    a = 1.0 / np.asarray(radii, dtype=np.float64) ** 2
    cq = np.array([a[0], a[1], a[2], 0, 0, 0])
    cl = -2 * a * c
    return QuadricCoefficients(cq, cl, 1.0 - np.sum(a * c * c))


def cylinder_y(center_x: float, center_z: float, radius: float) -> QuadricCoefficients:
    """Infinite cylinder parallel to the y axis."""
    cq = np.array([1.0, 0, 1.0, 0, 0, 0])
    cl = np.array([-2 * center_x, 0, -2 * center_z])
    return QuadricCoefficients(cq, cl, radius ** 2 - center_x ** 2 - center_z ** 2)


# ---------------------------------------------------------------------------
# intersection and rendering


def _quadratic_coeffs(origins, dirs, coeffs: QuadricCoefficients):
    A = coeffs.hessian_half()
    Ad = dirs @ A
    a = np.sum(dirs * Ad, axis=-1)
    b = 2.0 * np.sum(origins * Ad, axis=-1) + dirs @ coeffs.cl
    c0 = np.sum(origins * (origins @ A), axis=-1) + origins @ coeffs.cl - coeffs.c
    return a, b, c0


def intersect(origins, dirs, prim: QuadricPrimitive, t_min: float = T_MIN) -> np.ndarray:
    """Smallest t > t_min with origin + t*dir on the bounded primitive (NaN on miss).

    Directions need not be unit length; ``t`` is in units of ``|dir|``.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    origins, dirs = np.broadcast_arrays(origins, dirs)
    a, b, c0 = _quadratic_coeffs(origins, dirs, prim.coeffs)
    scale = np.maximum(np.abs(a), 1e-300)

    lin = np.abs(a) <= 1e-14 * np.maximum(np.abs(b), 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lin = np.where(lin & (b != 0), -c0 / np.where(b != 0, b, 1.0), np.nan)

    disc = b * b - 4.0 * a * c0
    snap = np.abs(disc) <= DISC_SNAP * (b * b + np.abs(4.0 * a * c0))
    disc = np.where(snap, 0.0, disc)
    ok = ~lin & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    sgn = np.where(b >= 0, 1.0, -1.0)
    q = -0.5 * (b + sgn * sq)
    with np.errstate(divide="ignore", invalid="ignore"):
        r1 = np.where(ok, q / np.where(ok, a, scale), np.nan)
        r2 = np.where(ok & (q != 0), c0 / np.where(q != 0, q, 1.0), r1)
    lo = np.fmin(r1, r2)
    hi = np.fmax(r1, r2)
    cands = [np.where(lin, t_lin, lo), np.where(lin, np.nan, hi)]

    best = np.full(a.shape, np.nan)
    for t in cands:
        with np.errstate(invalid="ignore"):
            valid = np.isfinite(t) & (t > t_min)
        hit = origins + np.where(valid, t, 0.0)[..., None] * dirs
        inside = np.all((hit >= prim.bbox_min - BOX_TOL) & (hit <= prim.bbox_max + BOX_TOL), axis=-1)
        take = valid & inside & np.isnan(best)
        best = np.where(take, t, best)
    return best


def ray_quadric_intersect(origin, direction, prim: QuadricPrimitive) -> Optional[float]:
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise InvalidInputError("ray direction must be unit length")
    t = intersect(np.asarray(origin, dtype=np.float64), d, prim)
    return None if np.isnan(t) else float(t)


def render_ground_truth(scene: SyntheticScene, pose: Pose, k: CameraIntrinsics,
                        frame_id: int = 0) -> Frame:
    """Exact depth (camera z), semantic mask and flat colors for one view."""
    rays_cam = k.pixel_rays()
    dirs = rays_cam @ pose.R.T
    origin = np.broadcast_to(pose.translation, dirs.shape)
    depth = np.full(dirs.shape[:2], np.inf)
    mask = np.zeros(dirs.shape[:2], dtype=np.int64)
    rgb = np.zeros(dirs.shape[:2] + (3,))
    for prim in scene.primitives:
        # camera-frame ray vectors have unit z, so the ray parameter is the depth
        t = intersect(origin, dirs, prim)
        closer = np.isfinite(t) & (t < depth)
        depth[closer] = t[closer]
        mask[closer] = prim.semantic_id
        rgb[closer] = prim.color
    depth[~np.isfinite(depth)] = 0.0
    return Frame(rgb, depth, mask, k, pose, frame_id)


def render_sequence(scene: SyntheticScene, poses: Sequence[Pose] = (), k: CameraIntrinsics = None) -> list[Frame]:
    poses = list(poses) or scene.poses
    k = k or scene.intrinsics
    return [render_ground_truth(scene, p, k, i) for i, p in enumerate(poses)]


# ---------------------------------------------------------------------------
# noise


def _rng(seed: int, frame_id: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(frame_id) & 0xFFFFFFFF, stream])
    return np.random.Generator(np.random.Philox(ss))


def boundary_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Pixels within ``radius`` (Chebyshev) of a change in segment id."""
    from scipy import ndimage

    if radius <= 0:
        return np.zeros(mask.shape, dtype=bool)
    size = 2 * radius + 1
    hi = ndimage.maximum_filter(mask, size=size, mode="nearest")
    lo = ndimage.minimum_filter(mask, size=size, mode="nearest")
    return hi != lo


def perturb_depth(frame: Frame, noise: NoiseModel) -> Frame:
    if noise.depth_sigma == 0 and noise.edge_blur_px == 0:
        return frame
    rng = _rng(noise.seed, frame.frame_id, _STREAM_DEPTH)
    h, w = frame.shape
    gauss = rng.standard_normal((h, w)) * noise.depth_sigma
    edge = rng.uniform(-5.0, 5.0, (h, w)) * noise.depth_sigma
    valid = frame.depth > 0
    border = boundary_mask(frame.mask, noise.edge_blur_px)
    depth = frame.depth + np.where(valid, gauss, 0.0) + np.where(valid & border, edge, 0.0)
    depth = np.where(valid, np.maximum(depth, 1e-3), 0.0)
    return frame.replace(depth=depth)


def perturb_pose(pose: Pose, noise: NoiseModel, frame_id: int = 0) -> Pose:
    rng = _rng(noise.seed, frame_id, _STREAM_POSE)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = abs(rng.standard_normal()) * np.deg2rad(noise.pose_rot_sigma)
    dt = rng.standard_normal(3) * noise.pose_trans_sigma
    rotated = pose.compose(Pose(axis_angle_to_quat(axis, angle), np.zeros(3)))
    return Pose(rotated.rotation, rotated.translation + dt)


# ---------------------------------------------------------------------------
# default desk-scale scenes


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose at ``eye`` looking at ``target`` (y down in the image)."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 0] = -R[:, 0]
    return Pose(matrix_to_quat(R), eye)


def default_intrinsics(size: int = 64) -> CameraIntrinsics:
    f = 0.95 * size
    return CameraIntrinsics(f, f, size / 2 - 0.5, size / 2 - 0.5, size, size)


def default_trajectory(n_frames: int = 5, target=(0.0, 0.1, 2.3), span: float = 1.6, step: float = 0.1) -> list[Pose]:
    """Sideways sweep that rises and advances by ``step`` per frame, always facing ``target``.

    With the default 64 px camera every consecutive pair moves by more than
    4 px of reprojection flow, so each frame qualifies as a keyframe.
    """
    xs = np.linspace(-span / 2, span / 2, n_frames) if n_frames > 1 else np.zeros(1)
    return [look_at((x, -step * i, step * i), target) for i, x in enumerate(xs)]


def default_scene(size: int = 64, n_frames: int = 5) -> SyntheticScene:
    """Desk-scale room corner: wall, floor, sphere, ellipsoid and a cylinder."""
    prims = [
        QuadricPrimitive(plane((0, 0, 1), 3.0), (0.85, 0.8, 0.7), 1, (-3, -2, 2.99), (3, 0.5, 3.01), "wall"),
        QuadricPrimitive(plane((0, 1, 0), 0.5), (0.45, 0.35, 0.25), 2, (-3, 0.49, 0), (3, 0.51, 3.0), "floor"),
        QuadricPrimitive(sphere((-0.45, 0.1, 2.1), 0.3), (0.9, 0.2, 0.2), 3,
                         (-0.8, -0.25, 1.75), (-0.1, 0.45, 2.45), "sphere"),
        QuadricPrimitive(ellipsoid((0.4, 0.25, 2.3), (0.3, 0.22, 0.25)), (0.2, 0.4, 0.9), 4,
                         (0.05, 0.0, 2.0), (0.75, 0.5, 2.6), "ellipsoid"),
        QuadricPrimitive(cylinder_y(0.05, 2.65, 0.15), (0.2, 0.8, 0.3), 5,
                         (-0.15, -0.35, 2.45), (0.25, 0.5, 2.85), "cylinder"),
    ]
    return SyntheticScene(prims, default_intrinsics(size), default_trajectory(n_frames))


def curved_scene(size: int = 64) -> SyntheticScene:
    """Three curved primitives on an empty background, viewed from the origin."""
    prims = [
        QuadricPrimitive(sphere((-0.35, -0.15, 1.6), 0.28), (0.9, 0.2, 0.2), 1,
                         (-0.7, -0.5, 1.2), (0.0, 0.2, 2.0), "sphere"),
        QuadricPrimitive(ellipsoid((0.35, -0.1, 1.9), (0.25, 0.3, 0.35)), (0.2, 0.4, 0.9), 2,
                         (0.05, -0.45, 1.5), (0.65, 0.25, 2.3), "ellipsoid"),
        # bowl z = 2.1 - 1.5 (x^2 + (y - 0.35)^2), concave side facing the camera
        QuadricPrimitive(QuadricCoefficients([1.5, 1.5, 0, 0, 0, 0], [0, -1.05, 1.0], 2.1 - 1.5 * 0.35 ** 2),
                         (0.3, 0.8, 0.3), 3, (-0.35, 0.2, 1.6), (0.35, 0.6, 2.2), "paraboloid"),
    ]
    return SyntheticScene(prims, default_intrinsics(size), [Pose.identity()])
