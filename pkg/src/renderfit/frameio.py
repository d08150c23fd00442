"""File formats: PNG images, pose JSON, frame bundles, CSV reports.

Conventions:

* color.png: 8-bit sRGB.
* depth.png: 16-bit grayscale in units of 0.1 mm (range 6.55 m), 0 = invalid.
* mask PNGs: 8-bit, 255 = 1.0.
* Poses interchange as JSON objects with an explicit row-major 3x3
  ``rotation`` and a 3-vector ``translation`` (meters), which avoids any
  quaternion convention ambiguity.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np
from PIL import Image

from .errors import RenderfitError
from .geometry import Camera, Pose
from .losses import PseudoLabels, SensorFrame
from .optim import Trace

DEPTH_UNIT_M = 1e-4  # 0.1 mm per 16-bit step


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def save_color_png(path: str, color: np.ndarray) -> None:
    arr = np.clip(np.asarray(color) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_color_png(path: str) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def save_depth_png(path: str, depth_m: np.ndarray) -> None:
    steps = np.asarray(depth_m) / DEPTH_UNIT_M
    if steps.max(initial=0.0) > 65535:
        raise RenderfitError(
            f"{path}: depth exceeds the 6.55 m range of the 16-bit format"
        )
    arr = np.clip(steps + 0.5, 0, 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def load_depth_png(path: str) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64)
    return arr * DEPTH_UNIT_M


def save_mask_png(path: str, mask: np.ndarray) -> None:
    arr = np.clip(np.asarray(mask) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# poses and cameras
# ---------------------------------------------------------------------------

def pose_to_dict(pose: Pose) -> dict:
    return {
        "rotation": pose.matrix().tolist(),
        "translation": pose.trans.tolist(),
    }


def pose_from_dict(d: dict) -> Pose:
    R = np.asarray(d["rotation"], dtype=np.float64)
    t = np.asarray(d["translation"], dtype=np.float64)
    if R.shape != (3, 3) or t.shape != (3,):
        raise RenderfitError("pose entry needs a 3x3 rotation and 3-vector translation")
    return Pose.from_matrix(R, t)


def save_pose_json(path: str, pose: Pose) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(pose_to_dict(pose), fh, indent=2)


def load_poses_json(path: str) -> list[Pose]:
    """Load a JSON array of pose objects (or a single object)."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, dict):
        data = [data]
    poses = []
    for i, entry in enumerate(data):
        try:
            poses.append(pose_from_dict(entry))
        except (KeyError, RenderfitError) as err:
            raise RenderfitError(f"{path}: entry {i}: {err}") from err
    return poses


def save_poses_json(path: str, poses: list[Pose]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([pose_to_dict(p) for p in poses], fh, indent=2)


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
    }


def camera_from_dict(d: dict) -> Camera:
    return Camera(
        fx=float(d["fx"]), fy=float(d["fy"]),
        cx=float(d["cx"]), cy=float(d["cy"]),
        width=int(d["width"]), height=int(d["height"]),
    )


# ---------------------------------------------------------------------------
# frame bundles
# ---------------------------------------------------------------------------

def write_frame(
    dirpath: str,
    sensor: SensorFrame,
    pseudo: PseudoLabels,
    gt_pose: Pose | None = None,
) -> None:
    """Write one frame as the directory layout the CLI consumes."""
    os.makedirs(dirpath, exist_ok=True)
    save_color_png(os.path.join(dirpath, "color.png"), sensor.color)
    if sensor.depth is not None:
        save_depth_png(os.path.join(dirpath, "depth.png"), sensor.depth)
    save_mask_png(os.path.join(dirpath, "mask_vis.png"), pseudo.mask_vis)
    save_mask_png(os.path.join(dirpath, "mask_amodal.png"), pseudo.mask_amodal)
    meta = {
        "camera": camera_to_dict(sensor.cam),
        "pseudo_pose": pose_to_dict(pseudo.pose),
        "depth_unit_m": DEPTH_UNIT_M,
    }
    if gt_pose is not None:
        meta["gt_pose"] = pose_to_dict(gt_pose)
    with open(os.path.join(dirpath, "frame.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def read_frame(dirpath: str) -> tuple[SensorFrame, PseudoLabels, Pose | None]:
    """Read a frame bundle written by :func:`write_frame`."""
    meta_path = os.path.join(dirpath, "frame.json")
    try:
        with open(meta_path, "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError as err:
        raise RenderfitError(f"frame metadata not found: {meta_path}") from err
    cam = camera_from_dict(meta["camera"])
    color = load_color_png(os.path.join(dirpath, "color.png"))
    depth_path = os.path.join(dirpath, "depth.png")
    depth = load_depth_png(depth_path) if os.path.exists(depth_path) else None
    mask_vis = load_mask_png(os.path.join(dirpath, "mask_vis.png"))
    mask_amodal = load_mask_png(os.path.join(dirpath, "mask_amodal.png"))
    sensor = SensorFrame(color=color, depth=depth, cam=cam)
    pseudo = PseudoLabels(
        pose=pose_from_dict(meta["pseudo_pose"]),
        mask_vis=mask_vis,
        mask_amodal=mask_amodal,
    )
    gt = pose_from_dict(meta["gt_pose"]) if "gt_pose" in meta else None
    return sensor, pseudo, gt


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def write_trace_csv(path: str, trace: Trace) -> None:
    """Columns: iter, total, one ``term:<name>`` per term, pose errors."""
    names = trace.term_names()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["iter", "total"]
            + [f"term:{n}" for n in names]
            + ["rot_err_deg", "trans_err_m"]
        )
        for rec in trace.records:
            writer.writerow(
                [rec.iteration, f"{rec.total:.12g}"]
                + [f"{rec.terms.get(n, 0.0):.12g}" for n in names]
                + [
                    "" if rec.rot_err_deg is None else f"{rec.rot_err_deg:.12g}",
                    "" if rec.trans_err_m is None else f"{rec.trans_err_m:.12g}",
                ]
            )


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
