"""Posed-image records and dataset loading."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import files
from .geometry import CameraIntrinsics, RigidPose

log = logging.getLogger(__name__)

MIN_MASK_FRACTION = 0.01


@dataclass
class PosedImage:
    rgb: np.ndarray
    mask: np.ndarray
    pose: RigidPose
    cam: CameraIntrinsics
    depth: np.ndarray | None = None
    azimuth_deg: float | None = None
    elevation_deg: float | None = None

    def __post_init__(self):
        if self.rgb.shape[:2] != self.mask.shape:
            raise ValueError(f"mask shape {self.mask.shape} does not match image {self.rgb.shape[:2]}")
        if self.rgb.shape[:2] != (self.cam.height, self.cam.width):
            raise ValueError("image size disagrees with intrinsics")


@dataclass
class ObjectRecord:
    object_id: str
    views: list = field(default_factory=list)

    def __post_init__(self):
        if not self.views:
            raise ValueError(f"object {self.object_id} has no views")
        shapes = {v.rgb.shape for v in self.views}
        if len(shapes) != 1:
            raise ValueError(f"object {self.object_id}: views differ in size {shapes}")


def intrinsics_from_json(d: dict) -> CameraIntrinsics:
    return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]))


def load_object(odir) -> ObjectRecord:
    odir = Path(odir)
    poses = json.loads((odir / "poses.json").read_text())
    cam = intrinsics_from_json(poses["intrinsics"])
    views = []
    for entry in poses["views"]:
        i = entry["index"]
        rgb = files.read_rgb(odir / f"view_{i:03d}.png")
        mask = files.read_mask(odir / f"mask_{i:03d}.png")
        depth_path = odir / f"depth_{i:03d}.f32"
        depth = files.read_depth(depth_path) if depth_path.exists() else None
        pose = RigidPose.from_matrix(np.asarray(entry["extrinsic"]).reshape(3, 4))
        views.append(PosedImage(rgb, mask, pose, cam, depth, entry.get("azimuth_deg"), entry.get("elevation_deg")))
    return ObjectRecord(odir.name, views)


def load_dataset(root) -> list[ObjectRecord]:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "poses.json").exists())
    if not dirs:
        raise FileNotFoundError(f"no object directories with poses.json under {root}")
    return [load_object(d) for d in dirs]


def filter_views(record: ObjectRecord, min_fraction: float = MIN_MASK_FRACTION) -> ObjectRecord:
    """Drop views whose silhouette covers less than ``min_fraction`` of the image."""
    keep = []
    for i, v in enumerate(record.views):
        frac = float(np.mean(v.mask))
        if frac < min_fraction:
            log.warning("object %s view %d: mask covers %.4f of image, dropped", record.object_id, i, frac)
        else:
            keep.append(v)
    return ObjectRecord(record.object_id, keep)
