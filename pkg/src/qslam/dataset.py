"""On-disk RGB-D dataset layout.

::

    root/
      camera.txt           fx fy cx cy width height
      poses.txt            frame_id tx ty tz qx qy qz qw   (camera-to-world, one line per frame)
      rgb/NNNNNN.png       8-bit RGB
      depth/NNNNNN.png     16-bit depth in millimeters, 0 = invalid
      mask/NNNNNN.png      16-bit segment ids, 0 = invalid

Floats are written with ``repr`` so poses round-trip exactly.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, InvalidInputError
from .geometry import CameraIntrinsics, Frame, Pose

DEPTH_SCALE = 1000.0  # PNG units per meter
MAX_DEPTH = 65.535


def frame_name(frame_id: int) -> str:
    return f"{int(frame_id):06d}.png"


# ---------------------------------------------------------------------------
# images


def write_rgb_png(path, rgb) -> None:
    rgb = np.asarray(rgb, dtype=np.float64)
    Image.fromarray(np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8), mode="RGB").save(path)


def read_rgb_png(path) -> np.ndarray:
    img = _open(path)
    if img.mode != "RGB":
        raise DataError(f"{path}: expected an 8-bit RGB image, got mode {img.mode}")
    return np.asarray(img, dtype=np.float64) / 255.0


def _write_u16(path, values) -> None:
    arr = np.asarray(values)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 65535:
        raise InvalidInputError(f"{path}: values outside the 16-bit range")
    Image.fromarray(arr.astype(np.uint16)).save(path)


def _read_u16(path) -> np.ndarray:
    img = _open(path)
    if img.mode not in ("I;16", "I"):
        raise DataError(f"{path}: expected a 16-bit single-channel PNG, got mode {img.mode}")
    return np.asarray(img, dtype=np.int64)


def write_depth_png(path, depth) -> None:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth > MAX_DEPTH):
        raise InvalidInputError(f"{path}: depth beyond {MAX_DEPTH} m cannot be stored")
    _write_u16(path, np.round(depth * DEPTH_SCALE))


def read_depth_png(path) -> np.ndarray:
    return _read_u16(path) / DEPTH_SCALE


def write_mask_png(path, mask) -> None:
    _write_u16(path, mask)


def read_mask_png(path) -> np.ndarray:
    return _read_u16(path)


def _open(path) -> Image.Image:
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    try:
        img = Image.open(path)
        img.load()
    except OSError as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return img


# ---------------------------------------------------------------------------
# text files


def write_camera(path, k: CameraIntrinsics) -> None:
    Path(path).write_text(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


def read_camera(path) -> CameraIntrinsics:
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    parts = Path(path).read_text().split()
    if len(parts) != 6:
        raise DataError(f"{path}: expected 'fx fy cx cy width height', got {len(parts)} values")
    try:
        fx, fy, cx, cy = (float(p) for p in parts[:4])
        w, h = int(parts[4]), int(parts[5])
        return CameraIntrinsics(fx, fy, cx, cy, w, h)
    except (ValueError, InvalidInputError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_poses(path, poses: dict) -> None:
    lines = []
    for fid in sorted(poses):
        p = poses[fid]
        vals = list(p.translation) + list(p.rotation)
        lines.append(f"{int(fid)} " + " ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, Pose]:
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    poses = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DataError(f"{path}:{n}: expected 'frame_id tx ty tz qx qy qz qw'")
        try:
            fid = int(parts[0])
            vals = [float(v) for v in parts[1:]]
            pose = Pose.from_quat(vals[3:], vals[:3])
        except (ValueError, InvalidInputError) as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        if fid in poses:
            raise DataError(f"{path}:{n}: duplicate frame id {fid}")
        poses[fid] = pose
    if not poses:
        raise DataError(f"{path}: no poses")
    return poses


# ---------------------------------------------------------------------------
# datasets


def write_dataset(root, frames: Sequence[Frame], poses: Optional[Sequence[Pose]] = None) -> None:
    """Write frames (with their own poses unless ``poses`` is given)."""
    root = Path(root)
    if not frames:
        raise InvalidInputError("no frames to write")
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_camera(root / "camera.txt", frames[0].intrinsics)
    poses = list(poses) if poses is not None else [f.pose for f in frames]
    write_poses(root / "poses.txt", {f.frame_id: p for f, p in zip(frames, poses)})
    for f in frames:
        name = frame_name(f.frame_id)
        write_rgb_png(root / "rgb" / name, f.rgb)
        write_depth_png(root / "depth" / name, f.depth)
        write_mask_png(root / "mask" / name, f.mask)


def list_frame_ids(root, sub: str) -> list[int]:
    d = Path(root) / sub
    if not d.is_dir():
        raise DataError(f"missing directory {d}")
    ids = []
    for p in sorted(d.glob("*.png")):
        try:
            ids.append(int(p.stem))
        except ValueError:
            raise DataError(f"{p}: file name is not a frame id") from None
    return ids


def read_dataset(root) -> list[Frame]:
    """Load and validate a dataset; frames are returned in frame-id order."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    k = read_camera(root / "camera.txt")
    poses = read_poses(root / "poses.txt")
    for sub in ("rgb", "depth", "mask"):
        ids = set(list_frame_ids(root, sub))
        missing = sorted(set(poses) - ids)
        extra = sorted(ids - set(poses))
        if missing:
            raise DataError(f"{root / sub}: no image for frame id {missing[0]} listed in poses.txt")
        if extra:
            raise DataError(f"{root / sub}/{frame_name(extra[0])}: frame id {extra[0]} not in poses.txt")
    frames = []
    for fid in sorted(poses):
        name = frame_name(fid)
        rgb = read_rgb_png(root / "rgb" / name)
        depth = read_depth_png(root / "depth" / name)
        mask = read_mask_png(root / "mask" / name)
        for what, arr in (("rgb", rgb), ("depth", depth), ("mask", mask)):
            if arr.shape[:2] != (k.height, k.width):
                raise DataError(f"{root / what / name}: size {arr.shape[1]}x{arr.shape[0]} does not match "
                                f"camera.txt ({k.width}x{k.height})")
        frames.append(Frame(rgb, depth, mask, k, poses[fid], fid))
    return frames
