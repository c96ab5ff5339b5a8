"""Pinhole camera model, rigid poses and frame containers.

Conventions
-----------
* Camera frame: x right, y down, z forward (optical axis).
* Poses are camera-to-world, stored as a unit quaternion ``(qx, qy, qz, qw)``
  plus a translation in meters.
* A depth of 0 marks an invalid pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BehindCameraError, InvalidInputError

QUAT_TOL = 1e-9


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidInputError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def pixel_rays(self) -> np.ndarray:
        """Camera-frame ray vectors with unit z for every pixel, shape (H, W, 3)."""
        v, u = np.mgrid[0:self.height, 0:self.width].astype(np.float64)
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)


# ---------------------------------------------------------------------------
# quaternions, (x, y, z, w) order


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("quaternion has zero or non-finite norm")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array([
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ])


def quat_conj(q) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]], dtype=np.float64)


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a quaternion. Non-unit input is normalized first."""
    x, y, z, w = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_to_matrix_backward(q, d_rot) -> np.ndarray:
    """Gradient w.r.t. ``q`` of ``sum(d_rot * quat_to_matrix(q))``.

    Differentiates through the normalization, so the result is orthogonal
    to ``q``.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    x, y, z, w = q / norm
    G = np.asarray(d_rot, dtype=np.float64)
    gx = (2 * y * (G[0, 1] + G[1, 0]) + 2 * z * (G[0, 2] + G[2, 0]) - 4 * x * (G[1, 1] + G[2, 2])
          + 2 * w * (G[2, 1] - G[1, 2]))
    gy = (2 * x * (G[0, 1] + G[1, 0]) + 2 * z * (G[1, 2] + G[2, 1]) - 4 * y * (G[0, 0] + G[2, 2])
          + 2 * w * (G[0, 2] - G[2, 0]))
    gz = (2 * x * (G[0, 2] + G[2, 0]) + 2 * y * (G[1, 2] + G[2, 1]) - 4 * z * (G[0, 0] + G[1, 1])
          + 2 * w * (G[1, 0] - G[0, 1]))
    gw = (2 * x * (G[2, 1] - G[1, 2]) + 2 * y * (G[0, 2] - G[2, 0]) + 2 * z * (G[1, 0] - G[0, 1]))
    g_unit = np.array([gx, gy, gz, gw])
    qh = q / norm
    return (g_unit - qh * (qh @ g_unit)) / norm


def matrix_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    return quat_normalize(q)


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([axis * np.sin(angle / 2.0), [np.cos(angle / 2.0)]])


def rotation_angle(q) -> float:
    """Geodesic angle (radians) of the rotation represented by ``q``."""
    w = abs(quat_normalize(q)[3])
    return 2.0 * float(np.arccos(min(1.0, w)))


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise InvalidInputError("pose contains non-finite values")
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise InvalidInputError(f"quaternion norm {np.linalg.norm(q)} is not 1")
        object.__setattr__(self, "rotation", _frozen(q))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_quat(cls, q, t) -> "Pose":
        """Build a pose, normalizing the quaternion."""
        return cls(quat_normalize(q), t)

    @classmethod
    def from_matrix(cls, T) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        q = quat_mul(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Pose.from_quat(q, t)

    def inverse(self) -> "Pose":
        q_inv = quat_conj(self.rotation)
        return Pose.from_quat(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def transform(self, points) -> np.ndarray:
        """Apply the transform to an (..., 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.translation


def transform_point(pose: Pose, p) -> np.ndarray:
    return pose.transform(p)


@dataclass(frozen=True)
class Frame:
    rgb: np.ndarray
    depth: np.ndarray
    mask: np.ndarray
    intrinsics: CameraIntrinsics
    pose: Pose
    frame_id: int = 0

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        rgb = np.asarray(self.rgb, dtype=np.float64)
        mask = np.asarray(self.mask)
        h, w = depth.shape
        if rgb.shape != (h, w, 3) or mask.shape != (h, w):
            raise InvalidInputError(
                f"frame {self.frame_id}: rgb {rgb.shape}, depth {depth.shape}, mask {mask.shape} disagree"
            )
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise InvalidInputError(
                f"frame {self.frame_id}: image {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )
        if not np.all(np.isfinite(depth)) or np.any(depth < 0):
            raise InvalidInputError(f"frame {self.frame_id}: depth must be finite and >= 0")
        object.__setattr__(self, "rgb", _frozen(rgb))
        object.__setattr__(self, "depth", _frozen(depth))
        object.__setattr__(self, "mask", _frozen(mask, dtype=np.int64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def replace(self, **changes) -> "Frame":
        kw = dict(rgb=self.rgb, depth=self.depth, mask=self.mask, intrinsics=self.intrinsics,
                  pose=self.pose, frame_id=self.frame_id)
        kw.update(changes)
        return Frame(**kw)

    def segment_ids(self) -> list[int]:
        ids = np.unique(self.mask)
        return [int(i) for i in ids if i > 0]


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    segment_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", _frozen(pts))
        if self.segment_ids is not None:
            object.__setattr__(self, "segment_ids", _frozen(self.segment_ids, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)


def backproject_pixel(u: float, v: float, d: float, k: CameraIntrinsics) -> np.ndarray:
    if not np.isfinite(d) or d <= 0:
        raise InvalidInputError(f"depth must be positive and finite, got {d}")
    if not (0 <= u < k.width and 0 <= v < k.height):
        raise InvalidInputError(f"pixel ({u}, {v}) outside image {k.width}x{k.height}")
    return np.array([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d])


def backproject_depth(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points for every pixel, shape (H, W, 3). Invalid pixels give z = 0."""
    return k.pixel_rays() * np.asarray(depth, dtype=np.float64)[..., None]


def backproject_segment(frame: Frame, segment_id: int) -> PointCloud:
    sel = (frame.mask == segment_id) & (frame.depth > 0)
    v, u = np.nonzero(sel)
    d = frame.depth[v, u]
    k = frame.intrinsics
    pts = np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=-1)
    return PointCloud(pts, np.full(len(pts), segment_id, dtype=np.int64))


def project_point(p, k: CameraIntrinsics) -> tuple[float, float, float]:
    x, y, z = np.asarray(p, dtype=np.float64)
    if not z > 0:
        raise BehindCameraError(f"point {tuple(p)} is behind the camera")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy, float(z))


def project_points(points: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Vectorized projection of (..., 3) camera-frame points to (..., 3) = (u, v, z).

    Points with z <= 0 yield NaN pixel coordinates.
    """
    p = np.asarray(points, dtype=np.float64)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(z > 0, z, np.nan)
        u = k.fx * p[..., 0] / zs + k.cx
        v = k.fy * p[..., 1] / zs + k.cy
    return np.stack([u, v, z], axis=-1)
