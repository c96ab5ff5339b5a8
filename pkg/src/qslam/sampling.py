"""Ray construction and depth-guided stratified sampling.

Sample positions ``t`` are camera-frame depths (the Z coordinate), the same
quantity stored in depth maps, so guided samples around a depth reading
``d`` land in ``[0.95 d, 1.05 d]`` literally. The world point for ``t`` is
``origin + t * R @ r`` where ``r`` is the camera ray with unit z component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import Frame, Pose

GUIDE_LO = 0.95
GUIDE_HI = 1.05
DUP_TOL = 1e-9


@dataclass(frozen=True)
class SampleConfig:
    n_s: int = 32
    n_d: int = 16
    d_near: float = 0.1
    d_far: float = 10.0
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.d_near < self.d_far:
            raise InvalidInputError(f"need d_near < d_far, got {self.d_near} and {self.d_far}")
        if self.n_s < 1 or self.n_d < 0:
            raise InvalidInputError("need n_s >= 1 and n_d >= 0")

    @property
    def n_samples(self) -> int:
        return self.n_s + self.n_d


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray
    pixel: tuple = (0.0, 0.0)
    segment_id: int = 0
    guide_depth: float = 0.0
    gt_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gt_depth: float = 0.0
    gt_semantic: int = 0

    def __post_init__(self):
        d = np.asarray(self.dir, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise InvalidInputError("ray direction must be unit length")
        object.__setattr__(self, "dir", d)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))


@dataclass(frozen=True)
class RaySamples:
    t_values: np.ndarray
    deltas: np.ndarray

    @classmethod
    def from_t(cls, t) -> "RaySamples":
        t = np.asarray(t, dtype=np.float64)
        return cls(t, np.diff(t))


def stratified(lo, hi, n: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """``n`` stratified samples per interval, vectorized over ``lo``/``hi``.

    Bin midpoints without ``rng``; one uniform draw per bin otherwise.
    """
    lo = np.asarray(lo, dtype=np.float64)[..., None]
    hi = np.asarray(hi, dtype=np.float64)[..., None]
    if n == 0:
        return np.zeros(lo.shape[:-1] + (0,))
    width = (hi - lo) / n
    k = np.arange(n, dtype=np.float64)
    if rng is None:
        offs = np.full(np.broadcast_shapes(lo.shape[:-1] + (n,)), 0.5)
    else:
        offs = rng.uniform(0.0, 1.0, size=lo.shape[:-1] + (n,))
    return lo + (k + offs) * width


def _separate(t: np.ndarray) -> np.ndarray:
    """Nudge near-duplicate sorted samples apart by ``DUP_TOL``."""
    t = np.sort(t, axis=-1)
    for i in range(1, t.shape[-1]):
        prev = t[..., i - 1]
        t[..., i] = np.where(t[..., i] - prev <= DUP_TOL, prev + DUP_TOL, t[..., i])
    return t


def sample_depths(guide_depth, cfg: SampleConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sorted sample depths, shape (..., n_s + n_d), for every guide depth.

    Rays without a guide (depth <= 0) get ``n_s + n_d`` uniform samples so
    that batches stay rectangular; :func:`sample_ray` returns only ``n_s``.
    """
    g = np.asarray(guide_depth, dtype=np.float64)
    r = rng if cfg.jitter else None
    uni = stratified(np.full(g.shape, cfg.d_near), np.full(g.shape, cfg.d_far), cfg.n_s, r)
    guided = stratified(GUIDE_LO * g, GUIDE_HI * g, cfg.n_d, r)
    if cfg.n_d and np.any(g <= 0):
        fill = stratified(np.full(g.shape, cfg.d_near), np.full(g.shape, cfg.d_far), cfg.n_s + cfg.n_d, r)
        t = np.where((g > 0)[..., None], np.concatenate([uni, guided], axis=-1), fill)
    else:
        t = np.concatenate([uni, guided], axis=-1)
    return _separate(t)


def sample_ray(ray: Ray, cfg: SampleConfig = SampleConfig(), rng: Optional[np.random.Generator] = None) -> RaySamples:
    if cfg.jitter and rng is None:
        rng = np.random.default_rng(cfg.seed)
    r = rng if cfg.jitter else None
    t = stratified(cfg.d_near, cfg.d_far, cfg.n_s, r)
    if ray.guide_depth > 0 and cfg.n_d:
        t = np.concatenate([t, stratified(GUIDE_LO * ray.guide_depth, GUIDE_HI * ray.guide_depth, cfg.n_d, r)])
    return RaySamples.from_t(_separate(t))


@dataclass
class RayBatch:
    """B rays drawn from one or more frames, with per-ray targets.

    ``dirs_cam`` are camera-frame rays with unit z; ``frame_index`` points
    into the frame list the batch was drawn from, so world rays can be
    rebuilt from (possibly updated) poses.
    """

    frame_index: np.ndarray
    pixels: np.ndarray
    dirs_cam: np.ndarray
    segment_id: np.ndarray
    guide_depth: np.ndarray
    gt_color: np.ndarray
    gt_depth: np.ndarray
    gt_semantic: np.ndarray
    epsilon: np.ndarray
    t: np.ndarray
    flags: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frame_index)

    @property
    def group(self) -> np.ndarray:
        """Quadric-group index per ray: one group per (frame, segment id)."""
        keys = np.stack([self.frame_index, self.segment_id], axis=1)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        return inv.reshape(-1)

    def world_rays(self, poses: Sequence[Pose]):
        """Ray origins and (non-unit, z-scaled) world directions."""
        R = np.stack([p.R for p in poses])[self.frame_index]
        o = np.stack([p.translation for p in poses])[self.frame_index]
        return o, np.einsum("bij,bj->bi", R, self.dirs_cam)

    def points(self, poses: Sequence[Pose]) -> np.ndarray:
        o, d = self.world_rays(poses)
        return o[:, None, :] + self.t[..., None] * d[:, None, :]

    def view_dirs(self, poses: Sequence[Pose]) -> np.ndarray:
        _, d = self.world_rays(poses)
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    @classmethod
    def empty(cls, n_samples: int, flags=()) -> "RayBatch":
        z = np.zeros(0)
        return cls(z.astype(np.int64), np.zeros((0, 2)), np.zeros((0, 3)), z.astype(np.int64), z,
                   np.zeros((0, 3)), z, z.astype(np.int64), z, np.zeros((0, n_samples)), list(flags))

    @classmethod
    def concatenate(cls, batches: Sequence["RayBatch"]) -> "RayBatch":
        names = ["frame_index", "pixels", "dirs_cam", "segment_id", "guide_depth", "gt_color",
                 "gt_depth", "gt_semantic", "epsilon", "t"]
        cols = {n: np.concatenate([getattr(b, n) for b in batches]) for n in names}
        return cls(**cols, flags=[f for b in batches for f in b.flags])


def _frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), int(frame_id) & 0xFFFFFFFF, 7])
    return np.random.Generator(np.random.Philox(ss))


def sample_frame(frame: Frame, count: int, cfg: SampleConfig = SampleConfig(), seed: int = 0,
                 frame_index: int = 0, epsilons: Optional[Mapping] = None,
                 guide_depth: Optional[np.ndarray] = None) -> RayBatch:
    """Draw ``count`` rays uniformly without replacement over valid-depth pixels.

    ``epsilons`` maps segment id to the fitting error of an accepted fit;
    other rays get NaN, which the loss treats as "no fit". ``guide_depth``
    defaults to the frame's own depth.
    """
    rng = _frame_rng(seed, frame.frame_id)
    valid = np.flatnonzero(frame.depth.ravel() > 0)
    if len(valid) == 0:
        return RayBatch.empty(cfg.n_samples, [f"frame {frame.frame_id}: no valid depth"])
    flags = []
    replace = count > len(valid)
    if replace:
        flags.append(f"frame {frame.frame_id}: {count} rays from {len(valid)} valid pixels, sampled with replacement")
    idx = np.sort(rng.choice(valid, size=count, replace=replace))
    return _batch_from_pixels(frame, idx, cfg, rng, frame_index, epsilons, guide_depth, flags)


def frame_rays(frame: Frame, cfg: SampleConfig = SampleConfig(), frame_index: int = 0,
               guide_depth: Optional[np.ndarray] = None, epsilons: Optional[Mapping] = None) -> RayBatch:
    """One ray per pixel in row-major order (for rendering full images)."""
    idx = np.arange(frame.depth.size)
    return _batch_from_pixels(frame, idx, cfg, _frame_rng(cfg.seed, frame.frame_id), frame_index, epsilons,
                              guide_depth, [])


def _batch_from_pixels(frame, idx, cfg, rng, frame_index, epsilons, guide_depth, flags) -> RayBatch:
    v, u = np.divmod(idx, frame.shape[1])
    k = frame.intrinsics
    dirs = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones(len(idx))], axis=1)
    seg = frame.mask.ravel()[idx].astype(np.int64)
    eps = np.full(len(idx), np.nan)
    if epsilons:
        for sid, e in epsilons.items():
            eps[seg == sid] = e
    guide = (frame.depth if guide_depth is None else np.asarray(guide_depth)).ravel()[idx]
    t = sample_depths(guide, cfg, rng)
    return RayBatch(
        frame_index=np.full(len(idx), frame_index, dtype=np.int64),
        pixels=np.stack([u, v], axis=1).astype(np.float64),
        dirs_cam=dirs,
        segment_id=seg,
        guide_depth=guide.astype(np.float64),
        gt_color=frame.rgb.reshape(-1, 3)[idx].astype(np.float64),
        gt_depth=frame.depth.ravel()[idx].astype(np.float64),
        gt_semantic=seg.copy(),
        epsilon=eps,
        t=t,
        flags=flags,
    )


def sample_batch(frames: Sequence[Frame], count: int, cfg: SampleConfig = SampleConfig(), seed: int = 0,
                 epsilons: Optional[Mapping] = None) -> RayBatch:
    """``count`` rays per frame. ``epsilons`` maps frame id -> {segment id: epsilon}."""
    parts = []
    for i, f in enumerate(frames):
        eps = (epsilons or {}).get(f.frame_id)
        parts.append(sample_frame(f, count, cfg, seed, i, eps))
    if not parts:
        return RayBatch.empty(cfg.n_samples, ["no frames"])
    return RayBatch.concatenate(parts)
