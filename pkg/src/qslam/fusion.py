"""TSDF fusion, iso-surface extraction and triangle-mesh I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, InvalidInputError
from .geometry import CameraIntrinsics, Frame, Pose

MIN_TRIANGLE_AREA = 1e-12
_CHUNK_VOXELS = 1 << 21


@dataclass
class TriangleMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: Optional[np.ndarray] = None  # per-vertex RGB in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.vertices):
                raise InvalidInputError("one color per vertex required")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle index out of range")

    def __len__(self) -> int:
        return len(self.triangles)

    def areas(self) -> np.ndarray:
        V, T = self.vertices, self.triangles
        return 0.5 * np.linalg.norm(np.cross(V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 0]]), axis=1)

    def without_degenerate(self) -> "TriangleMesh":
        if len(self.triangles) == 0:
            return self
        return TriangleMesh(self.vertices, self.triangles[self.areas() > MIN_TRIANGLE_AREA], self.colors)

    def compacted(self) -> "TriangleMesh":
        """Drop vertices no triangle refers to."""
        used = np.unique(self.triangles)
        remap = np.full(len(self.vertices), -1)
        remap[used] = np.arange(len(used))
        colors = None if self.colors is None else self.colors[used]
        return TriangleMesh(self.vertices[used], remap[self.triangles], colors)

    @classmethod
    def merge(cls, meshes: Sequence["TriangleMesh"]) -> "TriangleMesh":
        verts, tris, cols = [], [], []
        offset = 0
        with_color = all(m.colors is not None for m in meshes) and len(meshes) > 0
        for m in meshes:
            verts.append(m.vertices)
            tris.append(m.triangles + offset)
            if with_color:
                cols.append(m.colors)
            offset += len(m.vertices)
        if not meshes:
            return cls()
        return cls(np.concatenate(verts), np.concatenate(tris), np.concatenate(cols) if with_color else None)


@dataclass
class TsdfVolume:
    origin: np.ndarray
    voxel_size: float
    dims: tuple
    truncation: Optional[float] = None

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.voxel_size <= 0 or min(self.dims) < 2:
            raise InvalidInputError("voxel size must be positive and every dimension >= 2")
        if self.truncation is None:
            self.truncation = 5.0 * self.voxel_size
        if self.truncation <= self.voxel_size:
            raise InvalidInputError("truncation must exceed the voxel size")
        self.tsdf = np.ones(self.dims)
        self.weight = np.zeros(self.dims)
        self.color = np.zeros(self.dims + (3,))

    @classmethod
    def around(cls, lo, hi, voxel_size: float = 0.01, margin: Optional[float] = None, truncation=None):
        """Volume covering the box [lo, hi] plus a margin (default: the truncation distance)."""
        trunc = truncation if truncation is not None else 5.0 * voxel_size
        pad = trunc if margin is None else margin
        lo = np.asarray(lo, dtype=np.float64) - pad
        hi = np.asarray(hi, dtype=np.float64) + pad
        dims = np.maximum(np.ceil((hi - lo) / voxel_size).astype(int) + 1, 2)
        return cls(lo, voxel_size, tuple(dims), trunc)

    def voxel_centers(self) -> np.ndarray:
        axes = [self.origin[i] + self.voxel_size * np.arange(self.dims[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def tsdf_integrate(vol: TsdfVolume, depth, k: CameraIntrinsics, pose: Pose, color=None) -> TsdfVolume:
    """Fuse one depth map (in place) and return the volume.

    The signed distance is measured along the camera z axis (observed depth
    minus voxel depth), clamped to the truncation band and normalized to
    [-1, 1]. Voxels farther than one truncation behind the surface are left
    untouched.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if not np.any(depth > 0):
        return vol
    rgb = None if color is None else np.asarray(color, dtype=np.float64)
    nx, ny, nz = vol.dims
    slab = max(1, _CHUNK_VOXELS // (ny * nz))
    ys = vol.origin[1] + vol.voxel_size * np.arange(ny)
    zs = vol.origin[2] + vol.voxel_size * np.arange(nz)
    for x0 in range(0, nx, slab):
        xs = vol.origin[0] + vol.voxel_size * np.arange(x0, min(nx, x0 + slab))
        pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        sl = np.s_[x0:x0 + len(xs)]
        _integrate_points(vol.tsdf[sl].reshape(-1), vol.weight[sl].reshape(-1), vol.color[sl].reshape(-1, 3),
                          pts, depth, rgb, k, pose, vol.truncation)
    return vol


def _integrate_points(tsdf, weight, colors, pts, depth, rgb, k, pose, truncation):
    """Running-average update of flat views into the volume arrays."""
    cam = (pts - pose.translation) @ pose.R
    z = cam[:, 2]
    front = z > 1e-9
    zf = np.where(front, z, 1.0)
    u = np.where(front, np.round(k.fx * cam[:, 0] / zf + k.cx), -1).astype(np.int64)
    v = np.where(front, np.round(k.fy * cam[:, 1] / zf + k.cy), -1).astype(np.int64)
    inside = front & (u >= 0) & (u < k.width) & (v >= 0) & (v < k.height)
    d = np.zeros(len(z))
    d[inside] = depth[v[inside], u[inside]]
    sdf = d - z
    upd = np.nonzero(inside & (d > 0) & (sdf >= -truncation))[0]
    obs = np.clip(sdf[upd] / truncation, -1.0, 1.0)
    w = weight[upd]
    tsdf[upd] = (tsdf[upd] * w + obs) / (w + 1.0)
    if rgb is not None:
        colors[upd] = (colors[upd] * w[:, None] + rgb[v[upd], u[upd]]) / (w[:, None] + 1.0)
    weight[upd] = w + 1.0


def marching_cubes(vol: TsdfVolume, max_jump_factor: float = 2.5) -> TriangleMesh:
    """Zero level set of the observed part of the volume (empty if none).

    Crossings whose TSDF step exceeds ``max_jump_factor`` times the step of
    an ideal surface are discarded.
    """
    from skimage import measure

    observed = vol.weight > 0
    if not observed.any():
        return TriangleMesh()
    vals = vol.tsdf[observed]
    if vals.min() > 0 or vals.max() < 0:
        return TriangleMesh()
    try:
        verts, faces, _, _ = measure.marching_cubes(vol.tsdf, level=0.0, spacing=(vol.voxel_size,) * 3,
                                                    mask=observed, allow_degenerate=False)
    except (ValueError, RuntimeError):
        return TriangleMesh()
    grid = verts / vol.voxel_size
    hi_idx = np.array(vol.dims) - 1
    lo = np.clip(np.floor(grid + 1e-6).astype(np.int64), 0, hi_idx)
    hi = np.clip(np.ceil(grid - 1e-6).astype(np.int64), 0, hi_idx)
    # A true surface changes the TSDF by about voxel/truncation per voxel. Larger
    # jumps are where a clamped band behind one surface meets free space.
    jump = np.abs(vol.tsdf[tuple(hi.T)] - vol.tsdf[tuple(lo.T)])
    good_vertex = jump <= max_jump_factor * vol.voxel_size / vol.truncation
    faces = faces[np.all(good_vertex[faces], axis=1)]
    idx = np.clip(np.round(grid).astype(np.int64), 0, hi_idx)
    colors = vol.color[idx[:, 0], idx[:, 1], idx[:, 2]]
    mesh = TriangleMesh(verts + vol.origin, faces.astype(np.int64), colors).without_degenerate()
    return mesh.compacted()


def fuse_frames(frames: Sequence[Frame], voxel_size: float = 0.01, truncation: Optional[float] = None,
                depths: Optional[Sequence[np.ndarray]] = None, poses: Optional[Sequence[Pose]] = None,
                colors: Optional[Sequence[np.ndarray]] = None) -> TsdfVolume:
    """Integrate a frame sequence into a volume sized to the observed points."""
    depths = list(depths) if depths is not None else [f.depth for f in frames]
    poses = list(poses) if poses is not None else [f.pose for f in frames]
    colors = list(colors) if colors is not None else [f.rgb for f in frames]
    pts = [depth_to_world(d, f.intrinsics, p) for d, f, p in zip(depths, frames, poses)]
    pts = [p for p in pts if len(p)]
    if not pts:
        raise InvalidInputError("no valid depth to fuse")
    allp = np.concatenate(pts)
    vol = TsdfVolume.around(allp.min(axis=0), allp.max(axis=0), voxel_size, truncation=truncation)
    for d, f, p, c in zip(depths, frames, poses, colors):
        tsdf_integrate(vol, d, f.intrinsics, p, c)
    return vol


def depth_to_world(depth, k: CameraIntrinsics, pose: Pose) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    v, u = np.nonzero(depth > 0)
    d = depth[v, u]
    cam = np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=-1)
    return cam @ pose.R.T + pose.translation


def depth_map_mesh(depth, k: CameraIntrinsics, pose: Pose, mask=None, max_jump: float = 0.05) -> TriangleMesh:
    """Triangulate a depth map on its pixel grid (two triangles per valid 2x2 block).

    Blocks spanning an invalid pixel, a segment boundary, or a depth jump
    larger than ``max_jump`` relative to the block's nearest depth are skipped.
    """
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    cam = np.stack([depth * (u - k.cx) / k.fx, depth * (v - k.cy) / k.fy, depth], axis=-1)
    verts = cam.reshape(-1, 3) @ pose.R.T + pose.translation
    idx = np.arange(h * w).reshape(h, w)
    a, b, c, d = idx[:-1, :-1], idx[:-1, 1:], idx[1:, :-1], idx[1:, 1:]
    z = depth.reshape(-1)
    blocks = np.stack([z[a], z[b], z[c], z[d]], axis=-1)
    ok = np.all(blocks > 0, axis=-1)
    zmin = np.where(ok, blocks.min(axis=-1), 1.0)
    ok &= (blocks.max(axis=-1) - blocks.min(axis=-1)) <= max_jump * zmin
    if mask is not None:
        m = np.asarray(mask).reshape(-1)
        mb = np.stack([m[a], m[b], m[c], m[d]], axis=-1)
        ok &= np.all(mb == mb[..., :1], axis=-1)
    tris = np.concatenate([np.stack([a[ok], c[ok], b[ok]], axis=-1), np.stack([b[ok], c[ok], d[ok]], axis=-1)])
    used = np.unique(tris)
    remap = np.full(h * w, -1)
    remap[used] = np.arange(len(used))
    return TriangleMesh(verts[used], remap[tris]).without_degenerate()


# ---------------------------------------------------------------------------
# PLY


def write_ply(path, mesh: TriangleMesh) -> None:
    """ASCII PLY with fixed formatting so identical meshes give identical bytes."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property float x", "property float y", "property float z"]
    if mesh.colors is not None:
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header"]
    if mesh.colors is not None:
        rgb = np.clip(np.round(mesh.colors * 255), 0, 255).astype(int)
        body = [f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(mesh.vertices, rgb)]
    else:
        body = [f"{x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    body += [f"3 {i} {j} {k}" for i, j, k in mesh.triangles]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines + body) + "\n")


def read_ply(path) -> TriangleMesh:
    with open(path) as fh:
        text = fh.read().splitlines()
    try:
        end = text.index("end_header")
        header = text[:end]
        if not header or header[0] != "ply" or "format ascii 1.0" not in header:
            raise DataError(f"{path}: not an ASCII PLY file")
        nv = nf = 0
        props = []
        current = None
        for line in header:
            parts = line.split()
            if parts[:1] == ["element"]:
                current = parts[1]
                if current == "vertex":
                    nv = int(parts[2])
                elif current == "face":
                    nf = int(parts[2])
            elif parts[:1] == ["property"] and current == "vertex":
                props.append(parts[-1])
        body = text[end + 1:]
        vrows = np.array([[float(x) for x in body[i].split()] for i in range(nv)]).reshape(nv, len(props))
        frows = [body[nv + i].split() for i in range(nf)]
        tris = np.array([[int(x) for x in r[1:4]] for r in frows], dtype=np.int64).reshape(nf, 3)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed PLY ({exc})") from exc
    xyz = vrows[:, [props.index(c) for c in ("x", "y", "z")]]
    colors = None
    if "red" in props:
        colors = vrows[:, [props.index(c) for c in ("red", "green", "blue")]] / 255.0
    return TriangleMesh(xyz, tris, colors)
