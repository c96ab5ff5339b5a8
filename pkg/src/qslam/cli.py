"""Command-line pipeline: synth | fit | rectify | sample-check | train | render | fuse | eval | report.

Exit codes: 0 ok, 1 usage or configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, ConfigError
from .dataset import read_dataset, write_dataset, write_mask_png, write_poses
from .errors import ContractViolation, DataError, InvalidInputError, NumericalError
from .fusion import TriangleMesh, depth_map_mesh, fuse_frames, marching_cubes, read_ply, write_ply
from .geometry import CameraIntrinsics, Pose
from .metrics import TrajectoryPair, ate_rmse, depth_l1, mesh_metrics, psnr, ssim
from .optim import KeyframeBuffer, joint_optimize, render_frame, write_trace_csv
from .quadric import read_fit_records, write_fit_records
from .rectify import rectify_frame
from .sampling import GUIDE_HI, GUIDE_LO, sample_batch
from .synth import SyntheticScene, curved_scene, default_scene, perturb_depth, perturb_pose, render_sequence
from .transformer import QuadricRayTransformer

logger = logging.getLogger("qslam")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj


def write_report(path, report: dict, cfg: Config | None = None) -> None:
    body = dict(report)
    if cfg is not None:
        body["config"] = cfg.to_dict()
    body["version"] = __version__
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(_clean(body), sort_keys=True, indent=2) + "\n")


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _epsilons(fits) -> dict:
    """frame id -> {segment id: epsilon} for accepted fits."""
    out: dict = {}
    for f in fits:
        if f.accepted:
            out.setdefault(f.frame_id, {})[f.segment_id] = f.epsilon
    return out


def _load_fits(dataset: Path, explicit):
    path = Path(explicit) if explicit else dataset / "fits.jsonl"
    if not path.exists():
        if explicit:
            raise DataError(f"missing file {path}")
        return []
    try:
        return read_fit_records(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: malformed fit record ({exc})") from exc


def _scaled_intrinsics(k: CameraIntrinsics, f: int) -> CameraIntrinsics:
    return CameraIntrinsics(k.fx * f, k.fy * f, (k.cx + 0.5) * f - 0.5, (k.cy + 0.5) * f - 0.5,
                            k.width * f, k.height * f)


def reference_mesh(gt_frames, scene: SyntheticScene | None = None, upsample: int = 4) -> TriangleMesh:
    """Ground-truth surface seen by the gt cameras.

    With a scene description the surface is ray-cast analytically at
    ``upsample`` times the camera resolution; otherwise the gt depth maps
    are triangulated.
    """
    if scene is not None:
        k = _scaled_intrinsics(gt_frames[0].intrinsics, max(1, upsample))
        gt_frames = render_sequence(scene, [f.pose for f in gt_frames], k)
    return TriangleMesh.merge([depth_map_mesh(f.depth, f.intrinsics, f.pose, f.mask) for f in gt_frames])


def _load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file {path}")
    try:
        d = json.loads(path.read_text())
        model = QuadricRayTransformer.from_dict(d["model"])
        poses = {int(k): Pose(v["rotation"], v["translation"]) for k, v in d["poses"].items()}
    except (ValueError, KeyError, TypeError, ContractViolation) as exc:
        raise DataError(f"{path}: not a valid checkpoint ({exc})") from exc
    return model, poses, d.get("keyframes", sorted(poses))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg: Config):
    _require(args, "out")
    s = cfg["synth"]
    if args.scene:
        scene = SyntheticScene.load(args.scene)
    elif s["scene"] == "default":
        scene = default_scene(s["size"], s["n_frames"])
    elif s["scene"] == "curved":
        scene = curved_scene(s["size"])
    else:
        raise ConfigError(f"[synth] scene: expected 'default', 'curved' or --scene PATH, got {s['scene']!r}")
    out = Path(args.out)
    noise = cfg.noise_model()
    gt = render_sequence(scene)
    observed = [perturb_depth(f, noise) for f in gt]
    noisy_poses = [perturb_pose(f.pose, noise, f.frame_id) if f.frame_id > 0 else f.pose for f in gt]
    out.mkdir(parents=True, exist_ok=True)
    scene.save(out / "scene.json")
    write_dataset(out / "gt", gt)
    write_dataset(out / "observed", observed, noisy_poses)
    write_report(out / "synth_report.json", {
        "frames": len(gt), "primitives": len(scene.primitives),
        "initial_ate_cm": ate_rmse(TrajectoryPair(noisy_poses, [f.pose for f in gt])) if len(gt) > 1 else 0.0,
    }, cfg)


def _rectify_all(frames, cfg):
    rcfg = cfg.rectify_config()
    return [(f, rectify_frame(f, rcfg)) for f in frames]


def cmd_fit(args, cfg: Config):
    _require(args, "dataset", "out")
    fits = [fit for _, r in _rectify_all(read_dataset(args.dataset), cfg) for fit in r.fits]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_fit_records(args.out, fits)


def cmd_rectify(args, cfg: Config):
    _require(args, "dataset", "out")
    frames = read_dataset(args.dataset)
    out = Path(args.out)
    results = _rectify_all(frames, cfg)
    corrected = [f.replace(depth=r.corrected_depth) for f, r in results]
    write_dataset(out, corrected)
    (out / "correction").mkdir(exist_ok=True)
    per_frame, fits = [], []
    changes = []
    for f, r in results:
        write_mask_png(out / "correction" / f"{f.frame_id:06d}.png", r.correction_mask.astype(np.int64))
        valid = f.depth > 0
        diff = np.abs(r.corrected_depth - f.depth)[valid]
        changes.append(diff)
        fits.extend(r.fits)
        per_frame.append({"frame_id": f.frame_id, "corrected_pixels": int(r.correction_mask.sum()),
                          "accepted_segments": sorted(x.segment_id for x in r.fits if x.accepted),
                          "depth_l1_change_cm": 100.0 * float(diff.mean()) if diff.size else 0.0})
    write_fit_records(out / "fits.jsonl", fits)
    allc = np.concatenate(changes) if changes else np.zeros(0)
    write_report(out / "rectify_report.json", {
        "frames": per_frame,
        "depth_l1_change_cm": 100.0 * float(allc.mean()) if allc.size else 0.0,
        "corrected_pixels": int(sum(p["corrected_pixels"] for p in per_frame)),
    }, cfg)


def cmd_sample_check(args, cfg: Config):
    _require(args, "dataset", "out")
    frames = read_dataset(args.dataset)
    scfg = cfg.sample_config()
    fits = _load_fits(Path(args.dataset), args.fits)
    batch = sample_batch(frames, cfg["train"]["rays_per_image"], scfg, seed=cfg.seed * 1_000_003,
                         epsilons=_epsilons(fits))
    t = batch.t
    guided = batch.guide_depth > 0
    # samples are sorted, so count how many fall inside each ray's guide band
    lo = (GUIDE_LO * batch.guide_depth[guided])[:, None]
    hi = (GUIDE_HI * batch.guide_depth[guided])[:, None]
    band = np.sum((t[guided] >= lo) & (t[guided] <= hi), axis=1)
    in_band = bool(np.all(band >= scfg.n_d)) if band.size else True
    write_report(args.out, {
        "rays": len(batch), "samples_per_ray": int(t.shape[1]) if t.ndim == 2 else 0,
        "guided_rays": int(guided.sum()), "guided_samples_in_band": in_band,
        "min_samples_in_band": int(band.min()) if band.size else None,
        "sorted": bool(np.all(np.diff(t, axis=-1) > 0)),
        "t_min": float(t.min()) if t.size else None, "t_max": float(t.max()) if t.size else None,
        "rays_with_fit": int(np.isfinite(batch.epsilon).sum()),
        "rays_per_frame": {int(f.frame_id): int((batch.frame_index == i).sum()) for i, f in enumerate(frames)},
        "flags": batch.flags,
    }, cfg)


def cmd_train(args, cfg: Config):
    _require(args, "dataset", "out")
    frames = read_dataset(args.dataset)
    fits = _load_fits(Path(args.dataset), args.fits)
    tcfg = cfg.train_config()
    buf = KeyframeBuffer(window_size=tcfg.window, tau_flow=cfg["train"]["tau_flow"])
    for f in frames:
        buf.add(f)
    keyframes = buf.window()
    model = QuadricRayTransformer(cfg.transformer_config())
    res = joint_optimize(keyframes, model, tcfg, cfg.sample_config(), cfg.loss_config(), epsilons=_epsilons(fits))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = {f.frame_id: p for f, p in zip(keyframes, res.poses)}
    ckpt = {"model": model.to_dict(), "keyframes": [f.frame_id for f in keyframes],
            "poses": {str(k): {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
                      for k, p in poses.items()}}
    (out / "checkpoint.json").write_text(json.dumps(ckpt, sort_keys=True) + "\n")
    write_poses(out / "poses.txt", poses)
    write_trace_csv(out / "loss.csv", res.trace)
    write_report(out / "train_report.json", {
        "keyframes": [f.frame_id for f in keyframes], "iterations": len(res.trace), "pose_steps": res.pose_steps,
        "initial_loss": res.trace[0].total if res.trace else None,
        "final_loss": res.trace[-1].total if res.trace else None,
        "flags": res.flags + buf.flags,
    }, cfg)


def cmd_render(args, cfg: Config):
    _require(args, "dataset", "checkpoint", "out")
    frames = read_dataset(args.dataset)
    model, poses, keyframes = _load_checkpoint(args.checkpoint)
    scfg = cfg.sample_config()
    by_id = {f.frame_id: f for f in frames}
    missing = [k for k in keyframes if k not in by_id]
    if missing:
        raise DataError(f"{args.dataset}: checkpoint keyframe id {missing[0]} not in the dataset")
    rendered = []
    for fid in keyframes:
        f = by_id[fid]
        rgb, depth, labels = render_frame(model, f, poses[fid], scfg)
        rendered.append(f.replace(rgb=rgb, depth=depth, mask=labels, pose=poses[fid]))
    write_dataset(args.out, rendered)
    write_report(Path(args.out) / "render_report.json", {"keyframes": keyframes}, cfg)


def cmd_fuse(args, cfg: Config):
    _require(args, "dataset", "out")
    frames = read_dataset(args.dataset)
    fz = cfg["fuse"]
    vol = fuse_frames(frames, fz["voxel_size"], fz["truncation"] or None)
    mesh = marching_cubes(vol, fz["max_jump_factor"])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_ply(args.out, mesh)
    write_report(Path(args.out).with_suffix(".json"), {
        "vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
        "voxel_size": vol.voxel_size, "truncation": vol.truncation, "dims": list(vol.dims),
    }, cfg)


def _image_summary(rows, ids):
    sel = [r for r in rows if r["frame_id"] in ids]
    if not sel:
        return {"psnr": None, "ssim": None, "depth_l1_cm": None, "frames": 0}
    return {k: float(np.mean([r[k] for r in sel])) for k in ("psnr", "ssim", "depth_l1_cm")} | {"frames": len(sel)}


def cmd_eval(args, cfg: Config):
    _require(args, "dataset", "gt", "out")
    est = read_dataset(args.dataset)
    gt = read_dataset(args.gt)
    gt_by_id = {f.frame_id: f for f in gt}
    for f in est:
        if f.frame_id not in gt_by_id:
            raise DataError(f"{args.dataset}: frame id {f.frame_id} has no ground truth in {args.gt}")
    ev = cfg["eval"]
    rows = []
    for f in est:
        g = gt_by_id[f.frame_id]
        if f.shape != g.shape:
            raise DataError(f"frame id {f.frame_id}: image size {f.shape} differs from ground truth {g.shape}")
        try:
            dl1 = depth_l1(f.depth, g.depth)
        except NumericalError:
            dl1 = math.nan
        rows.append({"frame_id": f.frame_id, "psnr": psnr(f.rgb, g.rgb), "ssim": ssim(f.rgb, g.rgb),
                     "depth_l1_cm": dl1})
    est_ids = [f.frame_id for f in est]
    pair = TrajectoryPair({f.frame_id: f.pose for f in est}, {k: gt_by_id[k].pose for k in est_ids})
    report = {"ate_cm": ate_rmse(pair, ev["align_mode"]) if len(est) >= 2 else None,
              "align_mode": ev["align_mode"], "lpips": "unavailable (needs a pretrained network)"}
    keyframes = set(est_ids)
    if args.checkpoint:
        keyframes = set(_load_checkpoint(args.checkpoint)[2])
    kf = _image_summary(rows, keyframes)
    report.update({k: kf[k] for k in ("psnr", "ssim", "depth_l1_cm")})
    report["image_metrics"] = {"keyframes": kf, "all_frames": _image_summary(rows, set(est_ids))}
    report["per_frame"] = rows
    if args.mesh:
        if not Path(args.mesh).exists():
            raise DataError(f"missing file {args.mesh}")
        recon = read_ply(args.mesh)
        scene_path = Path(args.scene) if args.scene else Path(args.gt).parent / "scene.json"
        scene = SyntheticScene.load(scene_path) if scene_path.exists() else None
        ref = reference_mesh(gt, scene, ev["gt_upsample"])
        report.update(mesh_metrics(recon, ref, ev["n_samples"], ev["threshold"], seed=cfg.seed))
        report["reference_surface"] = "analytic" if scene is not None else "gt depth maps"
    else:
        report.update({"accuracy_cm": None, "completion_cm": None, "completion_ratio_pct": None})
    write_report(args.out, report, cfg)


def cmd_report(args, cfg: Config):
    _require(args, "out")
    if not args.inputs:
        raise UsageError("report: give one or more JSON reports to aggregate")
    reports = {}
    for p in args.inputs:
        path = Path(p)
        if not path.exists():
            raise DataError(f"missing file {path}")
        try:
            body = json.loads(path.read_text())
        except ValueError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from exc
        # named relative to the summary so the report does not depend on where the run lives
        rel = Path(os.path.relpath(path.resolve(), Path(args.out).resolve().parent))
        name = rel.with_suffix("").as_posix()
        reports[name] = body
    summary = {}
    for key in ("ate_cm", "psnr", "ssim", "depth_l1_cm", "accuracy_cm", "completion_cm", "completion_ratio_pct"):
        for name, body in reports.items():
            if isinstance(body, dict) and key in body:
                summary[key] = body[key]
    write_report(args.out, {"summary": summary, "reports": reports}, cfg)


COMMANDS = {
    "synth": cmd_synth, "fit": cmd_fit, "rectify": cmd_rectify, "sample-check": cmd_sample_check,
    "train": cmd_train, "render": cmd_render, "fuse": cmd_fuse, "eval": cmd_eval, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qslam", description="Quadric-guided RGB-D mapping toolkit.")
    p.add_argument("--version", action="version", version=f"qslam {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="INI config file")
        s.add_argument("--dataset", help="dataset directory")
        s.add_argument("--out", help="output path")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("synth", "eval"):
            s.add_argument("--scene", help="scene JSON")
        if name in ("sample-check", "train"):
            s.add_argument("--fits", help="fit records (default: DATASET/fits.jsonl if present)")
        if name in ("render", "eval"):
            s.add_argument("--checkpoint", help="train checkpoint.json")
        if name == "eval":
            s.add_argument("--gt", help="ground-truth dataset directory")
            s.add_argument("--mesh", help="reconstructed PLY mesh")
        if name == "report":
            s.add_argument("inputs", nargs="*", help="JSON reports, then section.key=value overrides")
        s.add_argument("overrides", nargs="*", help="section.key=value config overrides")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("qslam: choose a subcommand (" + " | ".join(COMMANDS) + ")")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        overrides = list(args.overrides)
        if args.command == "report":
            # positional JSON paths and overrides share the tail of the command line
            items = list(args.inputs) + overrides
            args.inputs = [i for i in items if "=" not in i]
            overrides = [i for i in items if "=" in i]
        cfg = Config.from_file(args.config, args.seed) if args.config else Config(seed=args.seed)
        cfg.apply_overrides(overrides).validate()
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidInputError, ContractViolation, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
