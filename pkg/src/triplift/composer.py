"""Insert lifted objects into street frames with exact 3D box labels.

Scene coordinates follow the KITTI rectified camera frame: x right, y down,
z forward, road plane at ``y = ground_y`` (the camera height for an identity
extrinsic).  Boxes are sampled, filtered against a bird's-eye drivable map,
rendered at the pixel footprint of their projected box, shadowed and
alpha-blended back to front.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib.path import Path as PolyPath
from scipy.ndimage import gaussian_filter
from scipy.spatial import ConvexHull

from .generator import TriPlaneField
from .geometry import (
    BoxPose,
    Calibration,
    CameraIntrinsics,
    RigidPose,
    ipm_ground_batch,
    pixel_grid,
    project,
    wrap_angle,
)
from .render import Placement, RaySampleSpec, render_image

log = logging.getLogger(__name__)

# KITTI training-set means for the Car class (metres)
CAR_MEANS = (3.88, 1.63, 1.53)
GAUSS_TRUNCATE = 3.0
LABEL_DECIMALS = 2


# --------------------------------------------------------------------------
# pose sampling
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SampleDistributions:
    x_range: tuple = (-20.0, 20.0)
    y_mean: float = 1.65
    y_std: float = 0.2
    z_range: tuple = (5.0, 45.0)
    l_mean: float = CAR_MEANS[0]
    w_mean: float = CAR_MEANS[1]
    h_mean: float = CAR_MEANS[2]
    size_std: float = 0.5
    theta_modes: tuple = (math.pi / 2, -math.pi / 2)
    theta_std: float = math.pi / 2
    min_size: float = 0.2

    def __post_init__(self):
        if min(self.y_std, self.size_std, self.theta_std) <= 0:
            raise ValueError("distribution widths must be positive")
        if min(self.l_mean, self.w_mean, self.h_mean) <= 0:
            raise ValueError("mean box dimensions must be positive")

    def with_ground(self, ground_y: float) -> "SampleDistributions":
        d = dict(self.__dict__)
        d["y_mean"] = ground_y
        return SampleDistributions(**d)


def _positive_normal(rng, mean, std, n, floor):
    out = rng.normal(mean, std, n)
    bad = out <= floor
    while bad.any():
        out[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = out <= floor
    return out


def sample_poses(dist: SampleDistributions, rng: np.random.Generator, n: int) -> dict:
    """Vectorised draws; returns arrays ``x y z l w h theta`` and the yaw ``mode`` index."""
    x = rng.uniform(*dist.x_range, n)
    y = rng.normal(dist.y_mean, dist.y_std, n)
    z = rng.uniform(*dist.z_range, n)
    l = _positive_normal(rng, dist.l_mean, dist.size_std, n, dist.min_size)
    w = _positive_normal(rng, dist.w_mean, dist.size_std, n, dist.min_size)
    h = _positive_normal(rng, dist.h_mean, dist.size_std, n, dist.min_size)
    mode = rng.integers(0, len(dist.theta_modes), n)
    raw = np.asarray(dist.theta_modes)[mode] + rng.normal(0.0, dist.theta_std, n)
    theta = np.array([wrap_angle(a) for a in raw])
    return dict(x=x, y=y, z=z, l=l, w=w, h=h, theta=theta, theta_raw=raw, mode=mode)


def sample_pose(dist: SampleDistributions, rng: np.random.Generator) -> BoxPose:
    s = sample_poses(dist, rng, 1)
    return BoxPose(*(float(s[k][0]) for k in ("x", "y", "z", "l", "w", "h", "theta")))


# --------------------------------------------------------------------------
# drivable area
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class GridSpec:
    x_range: tuple = (-25.0, 25.0)
    z_range: tuple = (0.0, 50.0)
    resolution: float = 0.25

    @property
    def shape(self):
        nz = int(round((self.z_range[1] - self.z_range[0]) / self.resolution))
        nx = int(round((self.x_range[1] - self.x_range[0]) / self.resolution))
        return nz, nx

    def cell_centers(self):
        nz, nx = self.shape
        xs = self.x_range[0] + (np.arange(nx) + 0.5) * self.resolution
        zs = self.z_range[0] + (np.arange(nz) + 0.5) * self.resolution
        return np.meshgrid(xs, zs)


@dataclass
class DrivableMap:
    """BEV occupancy: ``grid[row, col]`` with rows along z and columns along x."""

    grid: np.ndarray
    resolution: float
    origin: tuple  # (x_min, z_min)

    def __post_init__(self):
        if self.resolution <= 0 or self.grid.size == 0:
            raise ValueError("drivable map needs a positive resolution and a non-empty grid")
        self.grid = np.asarray(self.grid, dtype=bool)

    @classmethod
    def full(cls, spec: GridSpec = GridSpec(), value=True) -> "DrivableMap":
        return cls(np.full(spec.shape, value, dtype=bool), spec.resolution, (spec.x_range[0], spec.z_range[0]))

    def cell(self, x, z):
        col = math.floor((x - self.origin[0]) / self.resolution)
        row = math.floor((z - self.origin[1]) / self.resolution)
        return row, col

    def lookup(self, x, z) -> bool:
        row, col = self.cell(x, z)
        if 0 <= row < self.grid.shape[0] and 0 <= col < self.grid.shape[1]:
            return bool(self.grid[row, col])
        return False


def ipm_drivable_map(seg_mask, cam: CameraIntrinsics, cam_pose: RigidPose, ground_y: float,
                     spec: GridSpec = GridSpec()) -> DrivableMap:
    """Cell is drivable iff its ground-plane centre projects onto a drivable pixel."""
    seg_mask = np.asarray(seg_mask, dtype=bool)
    xs, zs = spec.cell_centers()
    pts = np.stack([xs, np.full_like(xs, ground_y), zs], axis=-1)
    px, depth = project(cam, cam_pose, pts)
    with np.errstate(invalid="ignore"):
        u = np.floor(px[..., 0])
        v = np.floor(px[..., 1])
        ok = (depth > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    grid = np.zeros(xs.shape, dtype=bool)
    grid[ok] = seg_mask[v[ok].astype(int), u[ok].astype(int)]
    return DrivableMap(grid, spec.resolution, (spec.x_range[0], spec.z_range[0]))


def filter_drivable(pose: BoxPose, dmap: DrivableMap, cam: CameraIntrinsics | None = None,
                    cam_pose: RigidPose | None = None) -> bool:
    """Accept a box iff the BEV cell under its footprint centre is drivable.

    ``pose`` is in the scene frame that ``dmap`` was built in; ``cam`` and
    ``cam_pose`` are accepted for symmetry with :func:`ipm_drivable_map`.
    """
    return dmap.lookup(pose.x, pose.z)


# --------------------------------------------------------------------------
# shadows and blending
# --------------------------------------------------------------------------


def default_shadow_sprite(size: int = 64) -> np.ndarray:
    """Soft ellipse: 1 at the centre, cosine falloff to 0 at the rim."""
    c = (np.arange(size) + 0.5) / size * 2 - 1
    u, v = np.meshgrid(c, c)
    r = np.sqrt(u * u + v * v)
    return np.where(r < 1, 0.5 * (1 + np.cos(np.pi * np.minimum(r, 1))), 0.0)


def cast_shadow(frame, pose: BoxPose, cam: CameraIntrinsics, cam_pose: RigidPose,
                sprite=None, strength: float = 0.4):
    """Darken the ground under ``pose`` by ``1 - strength * sprite``.

    The sprite's columns span the box length and its rows the width; it is
    laid on the plane of the box's bottom face and looked up with nearest
    neighbour sampling.
    """
    frame = np.asarray(frame, dtype=np.float64)
    if strength == 0:
        return frame.copy()
    sprite = default_shadow_sprite() if sprite is None else np.asarray(sprite, dtype=np.float64)
    pts, valid = ipm_ground_batch(cam, cam_pose, pose.y, pixel_grid(cam))
    rel = pts - np.array([pose.x, pose.y, pose.z])
    local = rel @ pose.rotation
    u = local[..., 0] / (pose.l / 2)
    v = local[..., 2] / (pose.w / 2)
    inside = valid & (np.abs(u) <= 1) & (np.abs(v) <= 1)
    sh, sw = sprite.shape
    col = np.clip(np.floor((u + 1) / 2 * sw), 0, sw - 1).astype(int)
    row = np.clip(np.floor((v + 1) / 2 * sh), 0, sh - 1).astype(int)
    shade = np.where(inside, sprite[row, col], 0.0)
    return frame * (1.0 - strength * shade)[..., None]


def feather_radius(sigma_px: float) -> int:
    return int(GAUSS_TRUNCATE * sigma_px + 0.5) if sigma_px > 0 else 0


def feather(mask, sigma_px: float):
    m = np.asarray(mask, dtype=np.float64)
    if sigma_px <= 0:
        return m
    return gaussian_filter(m, sigma_px, mode="nearest", truncate=GAUSS_TRUNCATE)


def blend(background, foreground, mask, sigma_px: float = 1.0):
    """``foreground * M_f + background * (1 - M_f)`` with a Gaussian-feathered mask."""
    bg = np.asarray(background, dtype=np.float64)
    fg = np.asarray(foreground, dtype=np.float64)
    if bg.shape != fg.shape or bg.shape[:2] != np.shape(mask):
        raise ValueError(f"shape mismatch: {bg.shape}, {fg.shape}, {np.shape(mask)}")
    mf = feather(mask, sigma_px)[..., None]
    return np.clip(fg * mf + bg * (1.0 - mf), 0.0, 1.0)


# --------------------------------------------------------------------------
# labels
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KittiLabel:
    box: BoxPose
    bbox2d: tuple  # (x1, y1, x2, y2)
    alpha: float
    cls: str = "Car"
    truncated: float = 0.0
    occluded: int = 0

    def format(self) -> str:
        b = self.box
        vals = [self.alpha, *self.bbox2d, b.h, b.w, b.l, b.x, b.y, b.z, b.theta]
        return f"{self.cls} {self.truncated:.2f} {self.occluded:d} " + " ".join(f"{v:.2f}" for v in vals)


def quantize_box(box: BoxPose, decimals: int = LABEL_DECIMALS) -> BoxPose:
    """Round a box to label precision so the written label describes it exactly."""
    q = [round(v, decimals) for v in box.as_tuple()]
    q[6] = round(wrap_angle(q[6]), decimals)
    return BoxPose(*q)


def observation_angle(box: BoxPose) -> float:
    return wrap_angle(box.theta - math.atan2(box.x, box.z))


def parse_label_line(line: str) -> KittiLabel:
    p = line.split()
    if len(p) < 15:
        raise ValueError(f"KITTI label needs 15 fields, got {len(p)}")
    v = [float(x) for x in p[3:15]]
    alpha, x1, y1, x2, y2, h, w, l, x, y, z, ry = v
    return KittiLabel(BoxPose(x, y, z, l, w, h, ry), (x1, y1, x2, y2), alpha, p[0], float(p[1]), int(float(p[2])))


def parse_labels(text: str) -> list[KittiLabel]:
    return [parse_label_line(s) for s in text.splitlines() if s.strip()]


def format_labels(labels) -> str:
    return "".join(lab.format() + "\n" for lab in labels)


# --------------------------------------------------------------------------
# box footprints in the image
# --------------------------------------------------------------------------


def projected_hull(box: BoxPose, cam: CameraIntrinsics, cam_pose: RigidPose):
    """Convex hull (k, 2) of the projected corners, or ``None`` if any corner is behind the camera."""
    px, depth = project(cam, cam_pose, box.corners())
    if np.any(depth <= 1e-6):
        return None
    hull = ConvexHull(px)
    return px[hull.vertices]


def rasterize_polygon(poly, width: int, height: int) -> np.ndarray:
    """Pixels whose centres lie inside (or on) ``poly``."""
    mask = np.zeros((height, width), dtype=bool)
    if poly is None:
        return mask
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())) + 1, width)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())) + 1, height)
    if x0 >= x1 or y0 >= y1:
        return mask
    gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5, np.arange(y0, y1) + 0.5)
    pts = np.stack([gx.ravel(), gy.ravel()], -1)
    inside = PolyPath(poly).contains_points(pts, radius=1e-9) | PolyPath(poly).contains_points(pts, radius=-1e-9)
    mask[y0:y1, x0:x1] = inside.reshape(gy.shape)
    return mask


def bbox_from_corners(hull, width: int, height: int):
    x1, y1 = hull.min(axis=0)
    x2, y2 = hull.max(axis=0)
    return (float(np.clip(x1, 0, width)), float(np.clip(y1, 0, height)),
            float(np.clip(x2, 0, width)), float(np.clip(y2, 0, height)))


def bbox_from_mask(mask):
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return (0.0, 0.0, 0.0, 0.0)
    return (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


# --------------------------------------------------------------------------
# frame composition
# --------------------------------------------------------------------------


@dataclass
class ComposeConfig:
    feather_sigma: float = 1.0
    shadow_strength: float = 0.4
    max_overlap: float = 0.3
    retry_budget: int = 50
    samples_per_ray: int = 48
    min_box_pixels: int = 16
    bbox_source: str = "corners"  # or "mask"
    use_shadow: bool = True
    latent_mixing: bool = False


@dataclass
class LiftedModel:
    """A fitted generator plus its latent bank."""

    generator: object
    latents: torch.Tensor
    object_ids: list = field(default_factory=list)

    def field_for(self, z):
        gen = self.generator
        with torch.no_grad():
            w = gen.map(torch.as_tensor(z, dtype=gen.dtype).reshape(1, -1))
            planes = gen.synthesize(w)
        return TriPlaneField(planes, gen), w


@dataclass
class PlacedObject:
    box: BoxPose
    latent: np.ndarray
    hull_mask: np.ndarray
    mask: np.ndarray | None = None  # hard mask of the rendered object (full frame)
    feathered: np.ndarray | None = None
    label: KittiLabel | None = None


@dataclass
class CompositeScene:
    image: np.ndarray
    calib: Calibration
    objects: list
    attempts: int = 0
    rejected: dict = field(default_factory=dict)

    @property
    def labels(self):
        return [o.label for o in self.objects]


def _overlap(a, b):
    inter = np.logical_and(a, b).sum()
    denom = min(a.sum(), b.sum())
    return inter / denom if denom else 0.0


def render_object(model: LiftedModel, z, box: BoxPose, calib: Calibration, spec: RaySampleSpec, hull=None):
    """Render ``z`` inside ``box`` over the box's pixel footprint.

    Returns full-frame ``(rgb, opacity, mask)``; rgb is un-premultiplied.
    """
    cam, pose = calib.cam, calib.pose
    H, W = cam.height, cam.width
    hull = projected_hull(box, cam, pose) if hull is None else hull
    rgb = np.zeros((H, W, 3))
    opacity = np.zeros((H, W))
    if hull is None:
        return rgb, opacity, np.zeros((H, W), dtype=bool)
    x0 = max(int(np.floor(hull[:, 0].min())), 0)
    x1 = min(int(np.ceil(hull[:, 0].max())) + 1, W)
    y0 = max(int(np.floor(hull[:, 1].min())), 0)
    y1 = min(int(np.ceil(hull[:, 1].max())) + 1, H)
    if x0 < x1 and y0 < y1:
        fld, w = model.field_for(z)
        win = cam.cropped(x0, y0, x1 - x0, y1 - y0)
        out = render_image(fld, w, win, pose, Placement.from_box(box), spec)
        op = out.opacity
        rgb[y0:y1, x0:x1] = np.clip(out.rgb / np.maximum(op, 1e-6)[..., None], 0.0, 1.0)
        opacity[y0:y1, x0:x1] = op
    return rgb, opacity, opacity >= 0.5


def compose_frame(background, calib: Calibration, model: LiftedModel | None, num_objects: int,
                  dist: SampleDistributions | None = None, dmap: DrivableMap | None = None,
                  config: ComposeConfig = ComposeConfig(), rng: np.random.Generator | None = None,
                  fixed_boxes=None) -> CompositeScene:
    """Place up to ``num_objects`` lifted objects into ``background`` (H, W, 3 in [0, 1]).

    Rejected samples (behind the camera / off-screen, non-drivable, or
    overlapping a placed object by more than ``max_overlap``) are redrawn
    until ``retry_budget`` draws are spent.  ``fixed_boxes`` bypasses
    sampling with explicit ``(BoxPose, latent)`` pairs.
    """
    rng = rng or np.random.default_rng(0)
    cam, cam_pose = calib.cam, calib.pose
    H, W = cam.height, cam.width
    background = np.asarray(background, dtype=np.float64)
    if background.shape[:2] != (H, W):
        raise ValueError(f"background {background.shape[:2]} does not match calibration {(H, W)}")
    ground_y = cam_pose.translation[1] + calib.cam_height_m
    if dist is None:
        dist = SampleDistributions().with_ground(ground_y)
    rejected = {"offscreen": 0, "drivable": 0, "overlap": 0}
    placed: list[PlacedObject] = []
    attempts = 0

    candidates = iter(fixed_boxes) if fixed_boxes is not None else None
    while len(placed) < num_objects:
        if candidates is not None:
            try:
                box, z = next(candidates)
            except StopIteration:
                break
        else:
            if attempts >= config.retry_budget:
                log.warning("retry budget exhausted: placed %d of %d objects", len(placed), num_objects)
                break
            box = quantize_box(sample_pose(dist, rng))
            z = _draw_latent(model, rng, config.latent_mixing)
        attempts += 1
        hull = projected_hull(box, cam, cam_pose)
        hull_mask = rasterize_polygon(hull, W, H)
        if hull is None or hull_mask.sum() < config.min_box_pixels:
            rejected["offscreen"] += 1
            continue
        if dmap is not None and not filter_drivable(box, dmap, cam, cam_pose):
            rejected["drivable"] += 1
            continue
        if any(_overlap(hull_mask, p.hull_mask) > config.max_overlap for p in placed):
            rejected["overlap"] += 1
            continue
        placed.append(PlacedObject(box, np.asarray(z), hull_mask))

    image = background.copy()
    spec = RaySampleSpec(config.samples_per_ray)
    for obj in sorted(placed, key=lambda o: -o.box.z):
        hull = projected_hull(obj.box, cam, cam_pose)
        rgb, _, mask = render_object(model, obj.latent, obj.box, calib, spec, hull)
        if config.use_shadow and config.shadow_strength > 0:
            image = cast_shadow(image, obj.box, cam, cam_pose, None, config.shadow_strength)
        image = blend(image, rgb, mask, config.feather_sigma)
        obj.mask = mask
        obj.feathered = feather(mask, config.feather_sigma)
        if config.bbox_source == "mask":
            bbox = bbox_from_mask(mask)
        else:
            bbox = bbox_from_corners(hull, W, H)
        obj.label = KittiLabel(obj.box, bbox, observation_angle(obj.box))

    return CompositeScene(image, calib, placed, attempts, rejected)


def _draw_latent(model: LiftedModel | None, rng, mixing: bool):
    if model is None or model.latents is None:
        raise ValueError("composition needs a lifted model with latents")
    lat = model.latents.detach().double().numpy()
    i = int(rng.integers(0, lat.shape[0]))
    if not mixing:
        return lat[i]
    j = int(rng.integers(0, lat.shape[0]))
    a = rng.random()
    return (1 - a) * lat[i] + a * lat[j]


def make_background(calib: Calibration, seed: int = 0, road_half_width: float = 7.0):
    """Synthetic street frame (sky, road, verge) and its drivable mask, for demos and tests."""
    cam, pose = calib.cam, calib.pose
    H, W = cam.height, cam.width
    rng = np.random.default_rng([seed, 0xB6])
    ground_y = pose.translation[1] + calib.cam_height_m
    pts, valid = ipm_ground_batch(cam, pose, ground_y, pixel_grid(cam))
    road = valid & (np.abs(pts[..., 0]) <= road_half_width)
    vv = (np.arange(H)[:, None] + 0.5) / H * np.ones((1, W))
    sky = np.stack([0.55 + 0.2 * vv, 0.7 + 0.15 * vv, 0.9 + 0.05 * vv], -1)
    verge = np.array([0.32, 0.45, 0.25])
    asphalt = np.array([0.36, 0.36, 0.38])
    img = np.where(valid[..., None], verge, sky)
    img = np.where(road[..., None], asphalt, img)
    img = img + rng.normal(0.0, 0.015, img.shape)
    return np.clip(img, 0, 1), road


def street_calibration(width: int = 320, height: int = 96, cam_height_m: float = 1.65) -> Calibration:
    """KITTI-like camera (focal length and principal point scaled from 1242x375) at the origin."""
    s = width / 1242.0
    cam = CameraIntrinsics(721.5377 * s, 721.5377 * s, 609.5593 * s, 172.854 * height / 375.0, width, height)
    return Calibration(cam, RigidPose.identity(), cam_height_m)
