"""Procedural multi-view data source.

Generates car-like assemblies of solid primitives and renders them exactly
(analytic ray casting), giving posed RGB images, silhouettes and depth that
serve both as lifting input and as ground truth.
"""
from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import files
from .geometry import (
    CameraIntrinsics,
    RigidPose,
    ViewSchedule,
    camera_rays,
    orbit_pose,
    schedule_angles,
    slab_intersect,
)

log = logging.getLogger(__name__)

DATASET_VERSION = 1
LIGHT_DIR = np.array([0.35, 0.85, -0.4]) / np.linalg.norm([0.35, 0.85, -0.4])
AMBIENT = 0.35
FILL = 1.0 - AMBIENT
SCENE_EXTENT = 0.9  # scenes are scaled into [-0.9, 0.9]^3


@dataclass(frozen=True)
class Primitive:
    """A solid: ``kind`` is ``"box"``, ``"ellipsoid"`` or ``"cylinder"``.

    ``size`` holds half-extents for boxes, radii for ellipsoids and
    ``(radius, radius, half_length)`` for cylinders, whose axis is world z.
    """

    kind: str
    center: tuple
    size: tuple
    color: tuple

    def scaled(self, offset, s) -> "Primitive":
        c = tuple(float(v) for v in (np.asarray(self.center) - offset) * s)
        return Primitive(self.kind, c, tuple(float(v) * s for v in self.size), self.color)

    def bounds(self):
        c, h = np.asarray(self.center), np.asarray(self.size)
        return c - h, c + h

    def intersect(self, o, d):
        """Nearest positive hit distance (inf on miss) and unit normals."""
        c = np.asarray(self.center)
        if self.kind == "box":
            return _hit_box(o, d, c, np.asarray(self.size))
        if self.kind == "ellipsoid":
            return _hit_ellipsoid(o, d, c, np.asarray(self.size))
        if self.kind == "cylinder":
            return _hit_cylinder(o, d, c, self.size[0], self.size[2])
        raise ValueError(f"unknown primitive {self.kind!r}")


def _hit_box(o, d, c, half):
    lo, hi = c - half, c + half
    tn, tf, hit = slab_intersect(o, d, lo, hi)
    t = np.where(hit & (tn > 0), tn, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    rel = (p - c) / half
    axis = np.argmax(np.abs(rel), axis=-1)
    n = np.zeros_like(p)
    np.put_along_axis(n, axis[..., None], np.sign(np.take_along_axis(rel, axis[..., None], -1)), -1)
    return t, n


def _hit_ellipsoid(o, d, c, radii):
    oo = (o - c) / radii
    dd = d / radii
    a = np.sum(dd * dd, -1)
    b = 2 * np.sum(oo * dd, -1)
    cc = np.sum(oo * oo, -1) - 1.0
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 0, t0, t1)
    t = np.where((disc >= 0) & (t > 0), t, np.inf)
    p = o + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    n = (p - c) / radii**2
    n /= np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    return t, n


def _hit_cylinder(o, d, c, r, hl):
    oo = o - c
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2 * (oo[..., 0] * d[..., 0] + oo[..., 1] * d[..., 1])
    cc = oo[..., 0] ** 2 + oo[..., 1] ** 2 - r * r
    disc = b * b - 4 * a * cc
    sq = np.sqrt(np.maximum(disc, 0.0))
    safe_a = np.where(a > 1e-15, a, 1.0)
    t_side = (-b - sq) / (2 * safe_a)
    z_side = oo[..., 2] + t_side * d[..., 2]
    side_ok = (a > 1e-15) & (disc >= 0) & (t_side > 0) & (np.abs(z_side) <= hl)
    t_side = np.where(side_ok, t_side, np.inf)

    t_cap = np.full(o.shape[:-1], np.inf)
    sign_cap = np.zeros(o.shape[:-1])
    dz = d[..., 2]
    safe_dz = np.where(dz != 0, dz, 1.0)
    for s in (-1.0, 1.0):
        tc = (s * hl - oo[..., 2]) / safe_dz
        px = oo[..., 0] + tc * d[..., 0]
        py = oo[..., 1] + tc * d[..., 1]
        ok = (dz != 0) & (tc > 0) & (px * px + py * py <= r * r)
        better = ok & (tc < t_cap)
        t_cap = np.where(better, tc, t_cap)
        sign_cap = np.where(better, s, sign_cap)

    use_cap = t_cap < t_side
    t = np.where(use_cap, t_cap, t_side)
    p = oo + np.where(np.isfinite(t), t, 0.0)[..., None] * d
    n_side = np.stack([p[..., 0], p[..., 1], np.zeros_like(t)], -1) / r
    n_cap = np.stack([np.zeros_like(t), np.zeros_like(t), sign_cap], -1)
    n = np.where(use_cap[..., None], n_cap, n_side)
    return t, n


@dataclass(frozen=True)
class PrimitiveScene:
    primitives: tuple
    seed: int = 0
    params: dict = field(default_factory=dict, compare=False)

    def bounds(self):
        lo = np.min([p.bounds()[0] for p in self.primitives], axis=0)
        hi = np.max([p.bounds()[1] for p in self.primitives], axis=0)
        return lo, hi

    @property
    def body_color(self):
        return self.primitives[0].color

    def to_dict(self):
        return {"seed": self.seed, "params": self.params, "primitives": [asdict(p) for p in self.primitives]}


def _palette(rng):
    h = rng.random()
    s = 0.45 + 0.5 * rng.random()
    v = 0.55 + 0.4 * rng.random()
    return tuple(round(float(c), 4) for c in colorsys.hsv_to_rgb(h, s, v))


def gen_scene(seed: int) -> PrimitiveScene:
    """Car-like assembly: body box, cabin box and four wheel cylinders."""
    rng = np.random.default_rng([seed, 0x0AC1E])
    length = rng.uniform(3.6, 4.8)
    width = rng.uniform(1.6, 1.95)
    wheel_r = rng.uniform(0.3, 0.42)
    clearance = wheel_r * rng.uniform(0.5, 0.8)
    body_h = rng.uniform(0.55, 0.85)
    cabin_len = length * rng.uniform(0.42, 0.62)
    cabin_h = rng.uniform(0.4, 0.65)
    cabin_off = length * rng.uniform(-0.15, 0.08)
    wheel_inset = rng.uniform(0.15, 0.25) * length

    body_color = _palette(rng)
    tint = rng.uniform(0.12, 0.3)
    cabin_color = (round(tint, 4), round(tint + 0.05, 4), round(min(tint + 0.2, 1.0), 4))
    wheel_color = (0.07, 0.07, 0.08)

    body_y = clearance + body_h / 2
    prims = [
        Primitive("box", (0.0, body_y, 0.0), (length / 2, body_h / 2, width / 2), body_color),
        Primitive(
            "box",
            (cabin_off, clearance + body_h + cabin_h / 2, 0.0),
            (cabin_len / 2, cabin_h / 2, width * 0.44),
            cabin_color,
        ),
    ]
    wheel_hl = 0.11
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx = sx * (length / 2 - wheel_inset)
            cz = sz * (width / 2 - wheel_hl * 0.6)
            prims.append(Primitive("cylinder", (cx, wheel_r, cz), (wheel_r, wheel_r, wheel_hl), wheel_color))

    tmp = PrimitiveScene(tuple(prims))
    lo, hi = tmp.bounds()
    mid = (lo + hi) / 2
    s = SCENE_EXTENT / np.max((hi - lo) / 2)
    params = dict(length=length, width=width, wheel_radius=wheel_r, body_height=body_h,
                  cabin_length=cabin_len, cabin_height=cabin_h, scale=float(s))
    params = {k: round(float(v), 6) for k, v in params.items()}
    return PrimitiveScene(tuple(p.scaled(mid, s) for p in prims), seed=seed, params=params)


@dataclass
class OracleView:
    rgb: np.ndarray  # (H, W, 3) float64
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) camera z, 0 off-object
    cam: CameraIntrinsics
    pose: RigidPose


def cast(scene: PrimitiveScene, origins, dirs):
    """Nearest hit over all primitives: (t, normal, primitive index or -1)."""
    best_t = np.full(origins.shape[:-1], np.inf)
    best_n = np.zeros(origins.shape)
    best_i = np.full(origins.shape[:-1], -1)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_n = np.where(closer[..., None], n, best_n)
        best_i = np.where(closer, i, best_i)
    return best_t, best_n, best_i


def shade(scene: PrimitiveScene, normals, index):
    colors = np.array([p.color for p in scene.primitives] + [(0.0, 0.0, 0.0)])
    lam = np.clip(normals @ LIGHT_DIR, 0.0, None)
    rgb = colors[index] * (AMBIENT + FILL * lam)[..., None]
    return np.where((index >= 0)[..., None], rgb, 0.0)


def render_oracle(scene: PrimitiveScene, cam: CameraIntrinsics, pose: RigidPose) -> OracleView:
    origins, dirs, cos_axis = camera_rays(cam, pose)
    t, n, idx = cast(scene, origins, dirs)
    mask = np.isfinite(t)
    depth = np.where(mask, np.where(mask, t, 0.0) * cos_axis, 0.0)
    return OracleView(shade(scene, n, idx), mask, depth, cam, pose)


def default_camera(size: int = 64) -> CameraIntrinsics:
    f = 1.7 * size
    return CameraIntrinsics(f, f, size / 2, size / 2, size, size)


def object_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0] & 0x7FFFFFFF)


def gen_dataset(root, num_objects: int, schedule: ViewSchedule, seed: int = 0,
                cam: CameraIntrinsics | None = None, pose_noise_deg: float = 0.0):
    """Render ``num_objects`` scenes under ``schedule`` and write them to ``root``.

    Layout per object: ``view_%03d.png``, ``mask_%03d.png``, ``depth_%03d.f32``,
    ``poses.json`` and ``manifest.json``.  With ``pose_noise_deg > 0`` the
    stored pose labels are jittered in azimuth/elevation while the images
    stay at the true pose.  Returns the list of object directories.
    """
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    cam = cam or default_camera()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    out = []
    for k in range(num_objects):
        oid = f"obj_{k:04d}"
        odir = root / oid
        odir.mkdir(exist_ok=True)
        sseed = object_seed(seed, k)
        scene = gen_scene(sseed)
        az, el = schedule_angles(schedule, object_seed(seed + 1, k))
        noise = np.random.default_rng([seed, k, 7]).normal(0.0, 1.0, (2, len(az))) * pose_noise_deg
        views = []
        for i, (a, e) in enumerate(zip(az, el)):
            pose = orbit_pose(a, e, schedule.radius)
            view = render_oracle(scene, cam, pose)
            files.write_rgb(odir / f"view_{i:03d}.png", view.rgb)
            files.write_mask(odir / f"mask_{i:03d}.png", view.mask)
            files.write_depth(odir / f"depth_{i:03d}.f32", view.depth)
            entry = {"index": i, "azimuth_deg": float(a), "elevation_deg": float(e)}
            if pose_noise_deg > 0:
                label = orbit_pose(a + noise[0, i], float(np.clip(e + noise[1, i], 0.0, 89.0)), schedule.radius)
                entry["extrinsic"] = label.matrix().ravel().tolist()
                entry["true_extrinsic"] = pose.matrix().ravel().tolist()
            else:
                entry["extrinsic"] = pose.matrix().ravel().tolist()
            views.append(entry)
        poses = {
            "version": DATASET_VERSION,
            "convention": "camera-to-world 3x4 row-major; camera x right, y down, z forward; world y up",
            "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                           "width": cam.width, "height": cam.height},
            "views": views,
        }
        manifest = {
            "version": DATASET_VERSION,
            "object_id": oid,
            "seed": sseed,
            "num_views": len(views),
            "radius": schedule.radius,
            "pose_noise_deg": pose_noise_deg,
            "scene": scene.to_dict(),
        }
        _write_json(odir / "poses.json", poses)
        _write_json(odir / "manifest.json", manifest)
        out.append(odir)
        log.info("wrote %s (%d views)", odir, len(views))
    return out


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def scene_from_manifest(manifest: dict) -> PrimitiveScene:
    s = manifest["scene"]
    prims = tuple(Primitive(p["kind"], tuple(p["center"]), tuple(p["size"]), tuple(p["color"]))
                  for p in s["primitives"])
    return PrimitiveScene(prims, seed=s["seed"], params=s["params"])


def projected_sphere_radius(f: float, r: float, dist: float) -> float:
    """Pixel radius of a sphere of radius ``r`` at distance ``dist`` on the axis."""
    return f * r / math.sqrt(dist * dist - r * r)
