"""Adam, trainable poses, keyframe management and alternating pose/map optimization."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .errors import ContractViolation, DivergenceError, InvalidInputError
from .geometry import Frame, Pose, project_points, quat_normalize, quat_to_matrix_backward
from .render import LossConfig, LossTerms, compute_loss, volume_render, volume_render_backward
from .sampling import RayBatch, SampleConfig, frame_rays, sample_batch
from .transformer import QuadricRayTransformer, TransformerInputs

logger = logging.getLogger(__name__)


class Adam:
    """Adam with bias correction over a dict of arrays, updated in place."""

    def __init__(self, params: Mapping[str, np.ndarray], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0
        self.skipped = 0

    def step(self, grads: Mapping[str, np.ndarray]) -> bool:
        """Apply one update; returns False (and changes nothing) on non-finite gradients."""
        if any(not np.all(np.isfinite(grads[k])) for k in self.params):
            self.skipped += 1
            logger.warning("non-finite gradient, Adam step skipped")
            return False
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return True


class TrainablePose:
    """Quaternion + translation with gradient buffers; re-normalized after updates."""

    def __init__(self, pose: Pose):
        self.quat = np.array(pose.rotation, dtype=np.float64)
        self.trans = np.array(pose.translation, dtype=np.float64)
        self.grad_quat = np.zeros(4)
        self.grad_trans = np.zeros(3)

    def to_pose(self) -> Pose:
        return Pose(self.quat.copy(), self.trans.copy())

    def renormalize(self) -> None:
        self.quat[...] = quat_normalize(self.quat)

    def zero_grad(self) -> None:
        self.grad_quat.fill(0.0)
        self.grad_trans.fill(0.0)


# ---------------------------------------------------------------------------
# keyframes


def reprojection_flow(ref: Frame, ref_pose: Pose, new_pose: Pose, stride: int = 1) -> float:
    """Mean pixel displacement of ``ref``'s valid pixels when seen from ``new_pose``.

    Exact optical flow for a static scene with known depth. Returns NaN if
    no valid pixel lands in front of the new camera.
    """
    k = ref.intrinsics
    v, u = np.mgrid[0:ref.shape[0]:stride, 0:ref.shape[1]:stride]
    d = ref.depth[::stride, ::stride]
    ok = d > 0
    u, v, d = u[ok].astype(np.float64), v[ok].astype(np.float64), d[ok]
    cam = np.stack([d * (u - k.cx) / k.fx, d * (v - k.cy) / k.fy, d], axis=-1)
    rel = new_pose.inverse() @ ref_pose
    moved = project_points(cam @ rel.R.T + rel.translation, k)
    good = np.isfinite(moved[:, 0])
    if not np.any(good):
        return math.nan
    return float(np.mean(np.hypot(moved[good, 0] - u[good], moved[good, 1] - v[good])))


@dataclass
class KeyframeBuffer:
    frames: list = field(default_factory=list)
    window_size: int = 25
    tau_flow: float = 4.0
    flags: list = field(default_factory=list)

    def window(self) -> list:
        return self.frames[-self.window_size:]

    def add(self, frame: Frame) -> bool:
        """Admit ``frame`` if it is the first or moved enough; returns whether it was added."""
        if not self.frames or keyframe_select(self, frame):
            self.frames.append(frame)
            return True
        return False


def keyframe_select(buffer: KeyframeBuffer, new_frame: Frame) -> bool:
    if not buffer.frames:
        return True
    last = buffer.frames[-1]
    flow = reprojection_flow(last, last.pose, new_frame.pose)
    if math.isnan(flow):
        buffer.flags.append(f"frame {new_frame.frame_id}: no valid pixels for flow, skipped")
        return False
    return flow > buffer.tau_flow


# ---------------------------------------------------------------------------
# batch evaluation


def transformer_inputs(batch: RayBatch, poses: Sequence[Pose], frames: Sequence[Frame]) -> TransformerInputs:
    size = np.array([[f.shape[1], f.shape[0]] for f in frames], dtype=np.float64)
    return TransformerInputs(
        points=batch.points(poses),
        view_dirs=batch.view_dirs(poses),
        t=batch.t,
        pixels=batch.pixels / size[batch.frame_index],
        ids=batch.segment_id,
    )


def pose_gradients(batch: RayBatch, poses: Sequence[Pose], d_points, d_view):
    """Chain point/view-direction gradients onto per-frame (quaternion, translation)."""
    R = np.stack([p.R for p in poses])[batch.frame_index]
    rc = batch.dirs_cam
    d = np.einsum("bij,bj->bi", R, rc)
    n = np.linalg.norm(d, axis=1, keepdims=True)
    vdir = d / n
    dd = (d_view - vdir * np.sum(vdir * d_view, axis=1, keepdims=True)) / n
    # p = o + t R rc  and  d = R rc
    dR = np.einsum("bni,bn,bj->bij", d_points, batch.t, rc) + dd[:, :, None] * rc[:, None, :]
    dT = d_points.sum(axis=1)
    nf = len(poses)
    gR = np.zeros((nf, 3, 3))
    gT = np.zeros((nf, 3))
    np.add.at(gR, batch.frame_index, dR)
    np.add.at(gT, batch.frame_index, dT)
    gQ = np.stack([quat_to_matrix_backward(poses[i].rotation, gR[i]) for i in range(nf)])
    return gQ, gT


def evaluate_batch(model: QuadricRayTransformer, batch: RayBatch, poses: Sequence[Pose], frames: Sequence[Frame],
                   d_far: float, loss_cfg: LossConfig, want_pose_grad: bool = False):
    """Forward + backward on one batch. Map gradients accumulate in ``model.grads``.

    Returns ``(LossTerms, pose_grads or None)``.
    """
    inp = transformer_inputs(batch, poses, frames)
    sigma, rgb, logits = model.forward(inp)
    out, cache = volume_render(sigma, rgb, logits, batch.t, d_far)
    terms, dc, dd, ds = compute_loss(out, batch.gt_color, batch.gt_depth, batch.gt_semantic,
                                     batch.epsilon, batch.group, loss_cfg)
    g_sigma, g_rgb, g_logits = volume_render_backward(cache, dc, dd, ds)
    d_in = model.backward(g_sigma, g_rgb, g_logits)
    pose_grad = pose_gradients(batch, poses, d_in["points"], d_in["view_dirs"]) if want_pose_grad else None
    return terms, pose_grad


def render_frame(model: QuadricRayTransformer, frame: Frame, pose: Pose, sample_cfg: SampleConfig = SampleConfig(),
                 min_opacity: float = 0.5, blocks_per_chunk: int = 4):
    """Render color, depth and semantic labels for every pixel of ``frame`` seen from ``pose``.

    The frame's depth guides the samples. Depth is set to 0 (invalid) where
    the accumulated opacity is below ``min_opacity``. Chunks are whole
    inter-ray blocks, so the result equals a single forward pass.
    """
    h, w = frame.shape
    batch = frame_rays(frame, sample_cfg)
    chunk = model.cfg.max_rays * blocks_per_chunk
    rgb = np.zeros((len(batch), 3))
    depth = np.zeros(len(batch))
    labels = np.zeros(len(batch), dtype=np.int64)
    for s in range(0, len(batch), chunk):
        sl = slice(s, s + chunk)
        part = RayBatch(*(getattr(batch, f)[sl] for f in ("frame_index", "pixels", "dirs_cam", "segment_id",
                                                           "guide_depth", "gt_color", "gt_depth", "gt_semantic",
                                                           "epsilon", "t")))
        sigma, c, logits = model.forward(transformer_inputs(part, [pose], [frame]))
        out, _ = volume_render(sigma, c, logits, part.t, sample_cfg.d_far)
        rgb[sl] = np.clip(out.color, 0.0, 1.0)
        depth[sl] = np.where(out.opacity >= min_opacity, out.depth, 0.0)
        labels[sl] = np.argmax(out.sem_probs, axis=-1)
    return rgb.reshape(h, w, 3), depth.reshape(h, w), labels.reshape(h, w)


# ---------------------------------------------------------------------------
# joint optimization


@dataclass(frozen=True)
class TrainConfig:
    iters: int = 500
    map_steps_per_pose_step: int = 5
    rays_per_image: int = 400
    window: int = 25
    map_lr: float = 1e-3
    pose_lr: float = 1e-4
    fix_first_pose: bool = False
    # map-only iterations before the first pose step (0 = alternate from the start)
    pose_warmup: int = 0
    divergence_factor: float = 1e3
    seed: int = 0

    def __post_init__(self):
        if self.iters < 0 or self.map_steps_per_pose_step < 1 or self.rays_per_image < 1 or self.window < 1 \
                or self.pose_warmup < 0:
            raise InvalidInputError("iters >= 0, map_steps_per_pose_step >= 1, rays_per_image >= 1, window >= 1, "
                                    "pose_warmup >= 0")
        if self.map_lr < 0 or self.pose_lr < 0:
            raise InvalidInputError("learning rates must be non-negative")


@dataclass
class TraceRow:
    iter: int
    l_c: float
    l_d: float
    l_s: float
    total: float
    pose_change_norm: float


@dataclass
class OptimizeResult:
    poses: list
    trace: list
    flags: list = field(default_factory=list)
    pose_steps: int = 0


def _mean_terms(terms: Sequence[LossTerms]):
    return [float(np.mean([getattr(t, k) for t in terms])) for k in ("l_c", "l_d", "l_s", "total")]


def joint_optimize(frames: Sequence[Frame], model: QuadricRayTransformer, cfg: TrainConfig = TrainConfig(),
                   sample_cfg: SampleConfig = SampleConfig(), loss_cfg: LossConfig = LossConfig(),
                   initial_poses: Optional[Sequence[Pose]] = None, epsilons: Optional[Mapping] = None,
                   callback: Optional[Callable[[TraceRow], None]] = None) -> OptimizeResult:
    """Alternate map steps (poses frozen) and pose steps (map frozen).

    Each iteration is one map step on a fresh batch of ``rays_per_image``
    rays from every keyframe in the window. After every
    ``map_steps_per_pose_step`` map steps, the loss over those same batches
    is re-evaluated with the map frozen and one Adam step is taken on the
    poses. ``frames`` supply images, depths and masks; their stored poses
    are the starting point unless ``initial_poses`` is given.
    """
    frames = list(frames)[-cfg.window:]
    if not frames:
        raise ContractViolation("joint optimization needs at least one keyframe")
    start = list(initial_poses)[-len(frames):] if initial_poses is not None else [f.pose for f in frames]
    tposes = [TrainablePose(p) for p in start]
    map_opt = Adam(model.params, cfg.map_lr)
    pose_params = {}
    for i, tp in enumerate(tposes):
        if cfg.fix_first_pose and i == 0:
            continue
        pose_params[f"q{i}"] = tp.quat
        pose_params[f"t{i}"] = tp.trans
    pose_opt = Adam(pose_params, cfg.pose_lr)
    trace, flags = [], []
    initial = None
    pending = []
    pose_steps = 0

    def current_poses():
        return [tp.to_pose() for tp in tposes]

    for it in range(cfg.iters):
        poses = current_poses()
        batch = sample_batch(frames, cfg.rays_per_image, sample_cfg, seed=cfg.seed * 1_000_003 + it,
                             epsilons=epsilons)
        flags.extend(batch.flags)
        if len(batch) == 0:
            raise ContractViolation("no valid rays in the keyframe window")
        model.zero_grad()
        terms, _ = evaluate_batch(model, batch, poses, frames, sample_cfg.d_far, loss_cfg)
        if not math.isfinite(terms.total):
            raise DivergenceError(f"iteration {it}: loss is not finite")
        if initial is None:
            initial = max(terms.total, 1e-300)
        if terms.total > cfg.divergence_factor * initial:
            raise DivergenceError(f"iteration {it}: loss {terms.total:.4g} exceeds "
                                  f"{cfg.divergence_factor:g} x initial {initial:.4g}")
        if cfg.map_lr > 0:
            map_opt.step(model.grads)
        pending.append(batch)

        change = 0.0
        if len(pending) == cfg.map_steps_per_pose_step:
            if cfg.pose_lr > 0 and pose_params and it >= cfg.pose_warmup:
                change = _pose_step(model, pending, poses_fn=current_poses, frames=frames, tposes=tposes,
                                    opt=pose_opt, d_far=sample_cfg.d_far, loss_cfg=loss_cfg, cfg=cfg)
                pose_steps += 1
            pending = []
        row = TraceRow(it, terms.l_c, terms.l_d, terms.l_s, terms.total, change)
        trace.append(row)
        if callback is not None:
            callback(row)
    model.zero_grad()
    return OptimizeResult(current_poses(), trace, flags + [f"map: {map_opt.skipped} skipped steps"] * bool(map_opt.skipped),
                          pose_steps)


def _pose_step(model, batches, poses_fn, frames, tposes, opt, d_far, loss_cfg, cfg) -> float:
    poses = poses_fn()
    nf = len(tposes)
    gq = np.zeros((nf, 4))
    gt = np.zeros((nf, 3))
    for b in batches:
        _, (q, t) = evaluate_batch(model, b, poses, frames, d_far, loss_cfg, want_pose_grad=True)
        gq += q
        gt += t
    model.zero_grad()  # the map is frozen during the pose step
    grads = {}
    for i, tp in enumerate(tposes):
        tp.grad_quat[...] = gq[i]
        tp.grad_trans[...] = gt[i]
        if f"q{i}" in opt.params:
            grads[f"q{i}"], grads[f"t{i}"] = tp.grad_quat, tp.grad_trans
    before = np.concatenate([np.concatenate([tp.quat, tp.trans]) for tp in tposes])
    if opt.step(grads):
        for i, tp in enumerate(tposes):
            if f"q{i}" in opt.params:
                tp.renormalize()
    after = np.concatenate([np.concatenate([tp.quat, tp.trans]) for tp in tposes])
    return float(np.linalg.norm(after - before))


def write_trace_csv(path, trace: Sequence[TraceRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iter", "l_c", "l_d", "l_s", "total", "pose_change_norm"])
        for r in trace:
            w.writerow([r.iter, repr(r.l_c), repr(r.l_d), repr(r.l_s), repr(r.total), repr(r.pose_change_norm)])
