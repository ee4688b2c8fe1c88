"""Volume rendering of tri-plane fields along box-clipped rays.

Rays are expressed in the field's normalised frame, where the object box is
``[-1, 1]^3``.  The ray parameter ``t`` stays in the caller's metric units
(metres for posed boxes), while density is integrated over field-frame arc
length, so a box stretched to any size keeps its opacity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import (
    BoxPose,
    CameraIntrinsics,
    RigidPose,
    camera_rays,
    pixel_grid,
    slab_intersect,
    to_box_frame,
)

DEPTH_EPS = 1e-6
FIELD_FROM_BOX = np.diag([1.0, -1.0, -1.0])  # y-down KITTI box axes -> y-up field axes


class RenderError(FloatingPointError):
    def __init__(self, message, object_index=None, ray_index=None):
        super().__init__(message)
        self.object_index = object_index
        self.ray_index = ray_index


@dataclass(frozen=True)
class RaySampleSpec:
    samples_per_ray: int = 64
    stratified: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValueError("samples_per_ray must be >= 2")


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    transmittance_far: np.ndarray  # (H, W)
    mask: np.ndarray  # (H, W) bool
    depth: np.ndarray  # (H, W) camera z, 0 where mask is 0

    @property
    def opacity(self):
        return 1.0 - self.transmittance_far


def mask_from_transmittance(t_far):
    """Foreground where the ray is at least half blocked (ties go to foreground)."""
    return (1.0 - np.asarray(t_far)) >= 0.5


# --------------------------------------------------------------------------
# placement of a field in a scene
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Placement:
    """Maps field coordinates to scene coordinates: ``X = R (s * x) + t``."""

    pose: RigidPose
    scale: np.ndarray

    @classmethod
    def identity(cls) -> "Placement":
        return cls(RigidPose.identity(), np.ones(3))

    @classmethod
    def from_box(cls, box: BoxPose) -> "Placement":
        return cls(RigidPose(box.rotation @ FIELD_FROM_BOX, box.center), box.half_extents)

    def rays_to_field(self, origins, dirs):
        return to_box_frame(origins, dirs, self.pose, self.scale)

    def to_scene(self, x):
        return self.pose.apply(np.asarray(x) * self.scale)


def field_rays(origins, dirs, placement: Placement | None = None):
    """Scene rays -> field-frame rays plus their box bounds.

    Returns ``(o, d, t_near, t_far, hit)`` with ``d`` not normalised: the ray
    parameter still measures scene distance.
    """
    placement = placement or Placement.identity()
    o, d = placement.rays_to_field(origins, dirs)
    tn, tf, hit = slab_intersect(o, d)
    tn = np.where(hit, tn, 0.0)
    tf = np.where(hit, tf, 0.0)
    return o, d, tn, tf, hit


# --------------------------------------------------------------------------
# differentiable core
# --------------------------------------------------------------------------


def sample_depths(t_near, t_far, n, stratified=False, generator=None):
    """Sample positions and piecewise-constant cell widths along each ray.

    Each sample owns the cell between the midpoints to its neighbours (the
    first and last cells extend to ``t_near``/``t_far``), so cell widths sum
    to ``t_far - t_near`` exactly.  Without stratification samples sit at
    bin midpoints and every cell is one bin wide.
    """
    shape = t_near.shape
    u = torch.arange(n, dtype=t_near.dtype) + 0.5
    if stratified:
        jitter = torch.rand(shape + (n,), generator=generator, dtype=torch.float64).to(t_near.dtype)
        u = torch.arange(n, dtype=t_near.dtype) + jitter
    else:
        u = u.expand(shape + (n,))
    span = (t_far - t_near).unsqueeze(-1)
    t = t_near.unsqueeze(-1) + span * (u / n)
    mids = 0.5 * (t[..., 1:] + t[..., :-1])
    edges = torch.cat([t_near.unsqueeze(-1), mids, t_far.unsqueeze(-1)], dim=-1)
    return t, edges[..., 1:] - edges[..., :-1]


def composite(sigma, rgb, t, delta):
    """Alpha-composite samples along the last axis.

    ``sigma`` (..., S), ``rgb`` (..., S, 3), ``t`` and ``delta`` (..., S).
    Returns colour (..., 3), far transmittance (...), expected ``t`` (...),
    per-sample transmittance (..., S) and weights (..., S).
    """
    tau = sigma * delta
    alpha = 1.0 - torch.exp(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[..., :1]), acc[..., :-1]], dim=-1))
    weights = trans * alpha
    color = (weights.unsqueeze(-1) * rgb).sum(dim=-2)
    t_far = torch.exp(-acc[..., -1])
    opacity = weights.sum(dim=-1)
    depth = (weights * t).sum(dim=-1) / opacity.clamp_min(DEPTH_EPS)
    return color, t_far, depth, trans, weights


def render_rays(gen, planes, w, origins, dirs, t_near, t_far, spec: RaySampleSpec, generator=None):
    """Render batched field-frame rays.

    ``origins``/``dirs`` (B, R, 3), ``t_near``/``t_far`` (B, R) torch tensors.
    Rays with ``t_far <= t_near`` render as transparent black.
    """
    S = spec.samples_per_ray
    t, delta = sample_depths(t_near, t_far, S, spec.stratified, generator)
    scale = dirs.norm(dim=-1, keepdim=True)  # field units per scene unit
    pts = origins.unsqueeze(-2) + t.unsqueeze(-1) * dirs.unsqueeze(-2)  # (B, R, S, 3)
    B, R = t_near.shape
    sigma, rgb, _ = gen.query(planes, pts.reshape(B, R * S, 3), w, check=False)
    sigma = sigma.view(B, R, S)
    rgb = rgb.view(B, R, S, 3)
    color, tfar, depth, _, _ = composite(sigma, rgb, t, delta * scale)
    if not torch.isfinite(color).all():
        bad = torch.nonzero(~torch.isfinite(color).all(-1))[0].tolist()
        raise RenderError(f"non-finite colour on ray (object {bad[0]}, ray {bad[1]})", bad[0], bad[1])
    return color, tfar, depth


def render_ray(field, w, ray, spec: RaySampleSpec = RaySampleSpec(), placement: Placement | None = None):
    """Render a single :class:`~triplift.geometry.Ray` -> (colour, T_far, depth)."""
    gen = field.generator
    o, d, tn, tf, hit = field_rays(ray.origin[None], ray.direction[None], placement)
    if not hit[0]:
        return np.zeros(3), 1.0, 0.0
    w = torch.as_tensor(w, dtype=gen.dtype)
    if w.dim() == 2:
        w = w.unsqueeze(0)
    tt = lambda a: torch.as_tensor(a, dtype=gen.dtype)[None]
    with torch.no_grad():
        c, T, dep = render_rays(gen, field.planes[:1], w[:1], tt(o), tt(d), tt(tn), tt(tf), spec)
    return c[0, 0].double().numpy(), float(T[0, 0]), float(dep[0, 0])


# --------------------------------------------------------------------------
# images
# --------------------------------------------------------------------------


def render_pixels(gen, planes, w, cam: CameraIntrinsics, pose: RigidPose, pixels,
                  placement: Placement | None = None, spec: RaySampleSpec = RaySampleSpec(),
                  chunk: int = 8192, generator=None):
    """Differentiable render of explicit pixel coordinates for one object.

    ``planes`` (1, 3, C, N, N), ``w`` (1, L, w_dim).  Returns colour (P, 3),
    far transmittance (P,) and camera-z depth (P,) as torch tensors.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    origins, dirs, cos_axis = camera_rays(cam, pose, pixels)
    o, d, tn, tf, hit = field_rays(origins, dirs, placement)
    dt = gen.dtype
    idx = np.nonzero(hit)[0]
    P = pixels.shape[0]
    color = torch.zeros(P, 3, dtype=dt)
    tfar = torch.ones(P, dtype=dt)
    depth = torch.zeros(P, dtype=dt)
    if idx.size == 0:
        return color, tfar, depth
    parts = []
    for s in range(0, idx.size, chunk):
        j = idx[s : s + chunk]
        as_t = lambda a: torch.as_tensor(a[j], dtype=dt)[None]
        c, T, dep = render_rays(gen, planes, w, as_t(o), as_t(d), as_t(tn), as_t(tf), spec, generator)
        parts.append((c[0], T[0], dep[0]))
    jt = torch.as_tensor(idx)
    color = color.index_put((jt,), torch.cat([p[0] for p in parts]))
    tfar = tfar.index_put((jt,), torch.cat([p[1] for p in parts]))
    z = torch.cat([p[2] for p in parts]) * torch.as_tensor(cos_axis[idx], dtype=dt)
    depth = depth.index_put((jt,), z)
    return color, tfar, depth


def render_image(field, w, cam: CameraIntrinsics, cam_pose: RigidPose,
                 box: BoxPose | Placement | None = None, spec: RaySampleSpec = RaySampleSpec(),
                 index: int = 0, chunk: int = 8192) -> RenderOutput:
    """Render every pixel of ``cam`` (any resolution) for object ``index``.

    ``box`` places the field: a :class:`BoxPose` (street scenes), an explicit
    :class:`Placement`, or ``None`` for the object-centric unit cube.
    """
    gen = field.generator
    placement = Placement.from_box(box) if isinstance(box, BoxPose) else box
    w = torch.as_tensor(w, dtype=gen.dtype)
    if w.dim() == 2:
        w = w.unsqueeze(0)
    with torch.no_grad():
        c, T, dep = render_pixels(gen, field.planes[index : index + 1], w[index : index + 1] if w.shape[0] > 1 else w,
                                  cam, cam_pose, pixel_grid(cam), placement, spec, chunk)
    H, W = cam.height, cam.width
    rgb = c.double().numpy().reshape(H, W, 3)
    tfar = T.double().numpy().reshape(H, W)
    mask = mask_from_transmittance(tfar)
    depth = np.where(mask, dep.double().numpy().reshape(H, W), 0.0)
    return RenderOutput(rgb, tfar, mask, depth)


def analytic_constant_opacity(sigma: float, length: float) -> float:
    return 1.0 - math.exp(-sigma * length)
