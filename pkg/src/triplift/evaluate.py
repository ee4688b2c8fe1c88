"""Multi-view consistency via depth warping, plus PSNR and mask IoU."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, RigidPose, orbit_pose, pixel_grid, project

PSNR_IDENTICAL = math.inf


def psnr(a, b, peak: float = 1.0) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(peak * peak / mse)


def mask_iou(a, b) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def warp_view(rgb_a, depth_a, pose_a: RigidPose, pose_b: RigidPose, cam: CameraIntrinsics, valid_a=None):
    """Forward-splat view A into view B using A's camera-z depth.

    Every valid pixel of A is lifted to 3D, projected into B and written to
    the pixel containing its projection; collisions keep the nearest point.
    Returns ``(warped (H, W, 3), covered (H, W) bool)``.
    """
    rgb_a = np.asarray(rgb_a, dtype=np.float64)
    depth_a = np.asarray(depth_a, dtype=np.float64)
    H, W = depth_a.shape
    valid_a = depth_a > 0 if valid_a is None else (np.asarray(valid_a, dtype=bool) & (depth_a > 0))
    pix = pixel_grid(cam)[valid_a]
    z = depth_a[valid_a]
    pc = np.stack([(pix[:, 0] - cam.cx) / cam.fx * z, (pix[:, 1] - cam.cy) / cam.fy * z, z], -1)
    world = pose_a.apply(pc)
    px, zb = project(cam, pose_b, world)
    with np.errstate(invalid="ignore"):
        u = np.floor(px[:, 0])
        v = np.floor(px[:, 1])
        ok = (zb > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
    target = (v[ok] * W + u[ok]).astype(np.int64)
    colors = rgb_a[valid_a][ok]
    zb = zb[ok]
    order = np.lexsort((zb, target))  # by target, then nearest first
    target, colors = target[order], colors[order]
    first = np.ones(target.size, dtype=bool)
    first[1:] = target[1:] != target[:-1]
    warped = np.zeros((H * W, 3))
    covered = np.zeros(H * W, dtype=bool)
    warped[target[first]] = colors[first]
    covered[target[first]] = True
    return warped.reshape(H, W, 3), covered.reshape(H, W)


def reprojection_error(rendered_b, warped, valid):
    """Mean absolute RGB difference over valid pixels; ``None`` when nothing is valid."""
    valid = np.asarray(valid, dtype=bool)
    if not valid.any():
        return None
    diff = np.abs(np.asarray(rendered_b, dtype=np.float64) - np.asarray(warped, dtype=np.float64))
    return float(diff[valid].mean())


@dataclass(frozen=True)
class ViewPairSpec:
    offset_deg: float = 5.0
    count: int = 100
    seed: int = 0
    elevation_range: tuple = (0.0, 20.0)
    radius: float = 4.0

    def __post_init__(self):
        if self.offset_deg <= 0 or self.count < 1:
            raise ValueError("need a positive offset and at least one pair")

    def pairs(self):
        """List of ``(azimuth_a, azimuth_b, elevation)`` in degrees."""
        rng = np.random.default_rng([self.seed, 0x9A1])
        az = rng.uniform(0.0, 360.0, self.count)
        el = rng.uniform(*self.elevation_range, self.count)
        return [(float(a), float(a + self.offset_deg), float(e)) for a, e in zip(az, el)]


@dataclass
class PairResult:
    pair_id: int
    azimuth_a: float
    azimuth_b: float
    re: float | None
    valid_fraction: float


@dataclass
class MetricReport:
    name: str
    pairs: list = field(default_factory=list)

    @property
    def errors(self):
        return [p.re for p in self.pairs if p.re is not None]

    @property
    def mean(self) -> float:
        e = self.errors
        return float(np.mean(e)) if e else math.nan

    @property
    def count(self) -> int:
        return len(self.errors)

    @property
    def valid_fraction(self) -> float:
        return float(np.mean([p.valid_fraction for p in self.pairs])) if self.pairs else 0.0

    def summary(self) -> dict:
        return {"name": self.name, "mean_re": self.mean, "pairs": self.count,
                "missing": len(self.pairs) - self.count, "valid_fraction": self.valid_fraction}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["pair_id", "azimuth_a", "azimuth_b", "re", "valid_fraction"])
            for p in self.pairs:
                wr.writerow([p.pair_id, f"{p.azimuth_a:.6f}", f"{p.azimuth_b:.6f}",
                             "" if p.re is None else f"{p.re:.8f}", f"{p.valid_fraction:.6f}"])


def consistency_report(name: str, render_view, spec: ViewPairSpec, cam: CameraIntrinsics,
                       reverse: bool = False) -> MetricReport:
    """Reprojection error over ``spec.pairs()``.

    ``render_view(pose, view_key)`` must return ``(rgb, depth)`` with camera-z
    depth (0 off the object); ``view_key`` is ``(pair_id, "a"|"b")`` so
    sources can inject per-view behaviour.  With ``reverse`` B is warped into A.
    """
    report = MetricReport(name)
    for i, (az_a, az_b, el) in enumerate(spec.pairs()):
        pa, pb = orbit_pose(az_a, el, spec.radius), orbit_pose(az_b, el, spec.radius)
        rgb_a, dep_a = render_view(pa, (i, "a"))
        rgb_b, dep_b = render_view(pb, (i, "b"))
        if reverse:
            warped, valid = warp_view(rgb_b, dep_b, pb, pa, cam)
            re = reprojection_error(rgb_a, warped, valid)
        else:
            warped, valid = warp_view(rgb_a, dep_a, pa, pb, cam)
            re = reprojection_error(rgb_b, warped, valid)
        report.pairs.append(PairResult(i, az_a, az_b, re, float(valid.mean())))
    return report


def recolor(rgb, rng, strength: float = 0.25):
    """Per-view random colour gain and offset, applied where the image is non-black.

    Mimics a 2D refinement stage that is not tied to the 3D scene.
    """
    gain = 1.0 + rng.uniform(-strength, strength, 3)
    offset = rng.uniform(-strength / 4, strength / 4, 3)
    fg = np.any(rgb > 0, axis=-1, keepdims=True)
    return np.where(fg, np.clip(rgb * gain + offset, 0.0, 1.0), rgb)


def write_summary(path, reports) -> None:
    Path(path).write_text(json.dumps({r.name: r.summary() for r in reports}, indent=1, sort_keys=True) + "\n")
