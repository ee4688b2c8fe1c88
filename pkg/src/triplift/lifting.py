"""Generative latent optimisation of a shared tri-plane field.

One latent code per object and the shared generator parameters are fitted
jointly to posed multi-view images with a photometric L1 term, a soft IoU
silhouette term and a feature-space (perceptual) term.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ObjectRecord, PosedImage, filter_views
from .generator import TriPlaneGenerator
from .geometry import camera_rays, pixel_grid
from .render import RaySampleSpec, RenderError, field_rays, render_pixels, render_rays

log = logging.getLogger(__name__)

IOU_EPS = 1e-8
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# named sub-streams of the run seed
STREAM_DATA, STREAM_INIT, STREAM_SAMPLING = 1, 2, 3


class LiftingError(FloatingPointError):
    def __init__(self, step, object_id, message="non-finite loss"):
        super().__init__(f"{message} at step {step} (object {object_id})")
        self.step = step
        self.object_id = object_id


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    iou: float = 1.0
    perc: float = 0.1

    def __post_init__(self):
        if self.iou < 0 or self.perc < 0:
            raise ValueError("loss weights must be non-negative")


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_rgb(target, rendered):
    """Mean absolute difference over every channel and pixel."""
    _same_shape(target, rendered)
    return (target - rendered).abs().mean()


def loss_iou(soft_mask, target_mask):
    """``1 - sum(min) / sum(max)`` on a soft silhouette; 0 when both are empty."""
    _same_shape(soft_mask, target_mask)
    target_mask = target_mask.to(soft_mask.dtype)
    inter = torch.minimum(soft_mask, target_mask).sum()
    union = torch.maximum(soft_mask, target_mask).sum()
    return 1.0 - (inter + IOU_EPS) / (union + IOU_EPS)


class FeatureExtractor(Protocol):
    name: str

    def __call__(self, images: torch.Tensor) -> list[torch.Tensor]:
        """(B, 3, H, W) -> list of per-scale feature maps."""


class GradientPyramid:
    """Fixed multi-scale image-gradient features.

    At each scale (2x average pooling between scales) the horizontal and
    vertical forward differences of every channel are flattened and
    concatenated.  Scales smaller than 2x2 are skipped.
    """

    def __init__(self, levels: int = 3):
        self.levels = levels
        self.name = f"gradient-pyramid-{levels}"

    def __call__(self, images):
        out = []
        x = images
        for s in range(self.levels):
            if s:
                if min(x.shape[-2:]) < 2:
                    break
                x = F.avg_pool2d(x, 2)
            H, W = x.shape[-2:]
            if H < 2 or W < 2:
                break
            dx = x[..., :, 1:] - x[..., :, :-1]
            dy = x[..., 1:, :] - x[..., :-1, :]
            out.append(torch.cat([dx.flatten(1), dy.flatten(1)], dim=1))
        return out


class ScriptedExtractor:
    """Feature extractor loaded from a TorchScript file (e.g. a VGG-16 trunk).

    The module must map (B, 3, H, W) images in [0, 1] to a tensor or a
    list/tuple of tensors.
    """

    def __init__(self, path):
        self.module = torch.jit.load(str(path)).eval()
        self.name = f"scripted:{Path(path).name}"

    def __call__(self, images):
        out = self.module(images)
        return list(out) if isinstance(out, (list, tuple)) else [out]


def loss_perceptual(features_a: Sequence[torch.Tensor], features_b: Sequence[torch.Tensor]):
    """Sum over scales of the mean absolute feature difference."""
    if len(features_a) != len(features_b):
        raise ValueError("feature pyramids come from different extractors")
    total = features_a[0].new_zeros(()) if features_a else torch.zeros(())
    for fa, fb in zip(features_a, features_b):
        _same_shape(fa, fb)
        total = total + (fa - fb).abs().mean()
    return total


def combine(l_rgb, l_iou, l_perc, weights: LossWeights):
    return l_rgb + weights.iou * l_iou + weights.perc * l_perc


def image_losses(target_rgb, target_mask, rgb, opacity, weights: LossWeights, extractor=None):
    """Loss terms for images shaped (B, H, W, 3) / masks (B, H, W)."""
    l_rgb = loss_rgb(target_rgb, rgb)
    l_iou = loss_iou(opacity, target_mask)
    if weights.perc > 0:
        extractor = extractor or GradientPyramid()
        fa = extractor(target_rgb.permute(0, 3, 1, 2))
        fb = extractor(rgb.permute(0, 3, 1, 2))
        l_perc = loss_perceptual(fa, fb)
    else:
        l_perc = rgb.new_zeros(())
    return l_rgb, l_iou, l_perc


def total_loss(gen: TriPlaneGenerator, z, view: PosedImage, weights: LossWeights = LossWeights(),
               spec: RaySampleSpec = RaySampleSpec(32), extractor=None, pixels=None):
    """Differentiable loss of one object (latent ``z``) against one posed view.

    Renders every pixel (or the given integer ``pixels`` grid, shape (h, w, 2))
    and returns ``(total, (l_rgb, l_iou, l_perc))``.
    """
    dt = gen.dtype
    z = z if z.dim() == 2 else z.unsqueeze(0)
    w = gen.map(z)
    planes = gen.synthesize(w)
    if pixels is None:
        pixels = np.stack(np.meshgrid(np.arange(view.cam.width), np.arange(view.cam.height)), -1)
    h, wd = pixels.shape[:2]
    centres = pixels.reshape(-1, 2) + 0.5
    color, tfar, _ = render_pixels(gen, planes, w, view.cam, view.pose, centres, spec=spec)
    rows, cols = pixels[..., 1].ravel(), pixels[..., 0].ravel()
    tgt = torch.as_tensor(view.rgb[rows, cols], dtype=dt).view(1, h, wd, 3)
    tmask = torch.as_tensor(view.mask[rows, cols], dtype=dt).view(1, h, wd)
    terms = image_losses(tgt, tmask, color.view(1, h, wd, 3), (1 - tfar).view(1, h, wd), weights, extractor)
    return combine(*terms, weights), terms


# --------------------------------------------------------------------------
# optimiser
# --------------------------------------------------------------------------


@dataclass
class OptimState:
    step: int = 0
    lrs: list = field(default_factory=list)
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lrs):
        return cls(0, list(lrs), [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(state: OptimState, params, grads, betas=ADAM_BETAS, eps=ADAM_EPS):
    """Bias-corrected Adam update, in place.  ``None`` gradients count as zero."""
    if len(params) != len(state.m):
        raise ValueError("parameter list does not match optimiser state")
    state.step += 1
    b1, b2 = betas
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    with torch.no_grad():
        for p, g, m, v, lr in zip(params, grads, state.m, state.v, state.lrs):
            if g is None:
                g = torch.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return params


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------


@dataclass
class LiftConfig:
    iterations: int = 2000
    rays_per_step: int = 256
    lr_params: float = 1e-3
    lr_latents: float = 1e-2
    lambda_iou: float = 1.0
    lambda_perc: float = 0.1
    seed: int = 0
    samples_per_ray: int = 32
    min_mask_fraction: float = 0.01
    latent_init_std: float = 1.0

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_iou, self.lambda_perc)

    @property
    def patch_size(self) -> int:
        return max(2, math.isqrt(self.rays_per_step))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LiftConfig":
        defaults = cls()
        unknown = set(d) - set(asdict(defaults))
        if unknown:
            raise ValueError(f"unknown lift config keys: {sorted(unknown)}")
        return cls(**{k: type(getattr(defaults, k))(v) for k, v in d.items()})


@dataclass
class ViewRays:
    """Precomputed field-frame rays of every view of one object."""

    origins: torch.Tensor  # (V, H*W, 3)
    dirs: torch.Tensor
    t_near: torch.Tensor  # (V, H*W)
    t_far: torch.Tensor
    rgb: torch.Tensor  # (V, H*W, 3)
    mask: torch.Tensor  # (V, H*W)
    height: int
    width: int

    @classmethod
    def build(cls, record: ObjectRecord, dtype) -> "ViewRays":
        cols = {k: [] for k in ("o", "d", "tn", "tf", "rgb", "mask")}
        for v in record.views:
            o, d, _ = camera_rays(v.cam, v.pose, pixel_grid(v.cam).reshape(-1, 2))
            o, d, tn, tf, _ = field_rays(o, d)
            cols["o"].append(o)
            cols["d"].append(d)
            cols["tn"].append(tn)
            cols["tf"].append(tf)
            cols["rgb"].append(v.rgb.reshape(-1, 3))
            cols["mask"].append(v.mask.reshape(-1))
        t = {k: torch.as_tensor(np.stack(a), dtype=dtype) for k, a in cols.items()}
        h, w = record.views[0].rgb.shape[:2]
        return cls(t["o"], t["d"], t["tn"], t["tf"], t["rgb"], t["mask"], h, w)


@dataclass
class LiftResult:
    generator: TriPlaneGenerator
    latents: torch.Tensor  # (K, z_dim)
    object_ids: list
    history: list  # rows (step, l_rgb, l_iou, l_perc, total)
    state: OptimState

    def latent(self, object_id):
        return self.latents[self.object_ids.index(object_id)]


def init_latents(num: int, z_dim: int, seed: int, std: float = 1.0, dtype=torch.float32):
    rng = np.random.default_rng([seed, STREAM_INIT])
    return torch.as_tensor(rng.normal(0.0, std, (num, z_dim)), dtype=dtype)


def _patch(rng, h, w, p):
    """Random (possibly dilated) p x p pixel patch -> flat indices (p*p,)."""
    max_stride = max(1, min(h, w) // p)
    stride = int(rng.integers(1, max_stride + 1))
    span = (p - 1) * stride + 1
    r0 = int(rng.integers(0, h - span + 1))
    c0 = int(rng.integers(0, w - span + 1))
    rows = r0 + stride * np.arange(p)
    cols = c0 + stride * np.arange(p)
    return (rows[:, None] * w + cols[None, :]).ravel()


def fit(records: Sequence[ObjectRecord], gen: TriPlaneGenerator, config: LiftConfig,
        latents: torch.Tensor | None = None, state: OptimState | None = None,
        history: list | None = None, extractor=None, callback=None) -> LiftResult:
    """Jointly optimise ``gen`` and one latent per record.

    Each step renders one random (dilated) ray patch from one random view of
    every object.  Passing ``latents``/``state``/``history`` from a previous
    :class:`LiftResult` resumes the run; the per-step randomness depends only
    on ``(seed, step)``, so a resumed run reproduces an uninterrupted one.
    """
    if not records:
        raise ValueError("fit needs at least one object record")
    records = [filter_views(r, config.min_mask_fraction) for r in records]
    dt = gen.dtype
    K = len(records)
    if latents is None:
        latents = init_latents(K, gen.config.z_dim, config.seed, config.latent_init_std, dt)
    latents = latents.detach().clone().to(dt).requires_grad_(True)
    params = list(gen.parameters())
    if state is None:
        state = OptimState.for_params(params + [latents], [config.lr_params] * len(params) + [config.lr_latents])
    history = list(history or [])
    rays = [ViewRays.build(r, dt) for r in records]
    weights = config.weights
    spec = RaySampleSpec(config.samples_per_ray, stratified=True)
    P = config.patch_size
    ids = [r.object_id for r in records]

    start = state.step
    for step in range(start, config.iterations):
        rng = np.random.default_rng([config.seed, STREAM_SAMPLING, step])
        tgen = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
        sel = []
        for vr in rays:
            v = int(rng.integers(0, vr.origins.shape[0]))
            sel.append((v, torch.as_tensor(_patch(rng, vr.height, vr.width, P))))
        stack = lambda name: torch.stack([getattr(vr, name)[v, j] for vr, (v, j) in zip(rays, sel)])

        w = gen.map(latents)
        planes = gen.synthesize(w)
        try:
            color, tfar, _ = render_rays(gen, planes, w, stack("origins"), stack("dirs"),
                                         stack("t_near"), stack("t_far"), spec, tgen)
        except RenderError as e:
            raise LiftingError(step, ids[e.object_index or 0], str(e)) from e
        tgt_rgb = stack("rgb").view(K, P, P, 3)
        tgt_mask = stack("mask").view(K, P, P)
        color = color.view(K, P, P, 3)
        opacity = (1 - tfar).view(K, P, P)
        per_obj = []
        for k in range(K):
            terms = image_losses(tgt_rgb[k : k + 1], tgt_mask[k : k + 1], color[k : k + 1],
                                 opacity[k : k + 1], weights, extractor)
            total = combine(*terms, weights)
            if not torch.isfinite(total):
                raise LiftingError(step, ids[k])
            per_obj.append((total, terms))
        loss = torch.stack([t for t, _ in per_obj]).mean()
        grads = torch.autograd.grad(loss, params + [latents], allow_unused=True)
        adam_step(state, params + [latents], grads)
        row = [step] + [float(torch.stack([t[i] for _, t in per_obj]).detach().mean()) for i in range(3)] + [float(loss.detach())]
        history.append(row)
        if callback is not None:
            callback(step, row)
        if step % 100 == 0:
            log.debug("step %d loss %.5f", step, row[-1])

    return LiftResult(gen, latents.detach(), ids, history, state)


HISTORY_COLUMNS = ("step", "l_rgb", "l_iou", "l_perc", "total")


def write_history(path, history) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(HISTORY_COLUMNS)
        for row in history:
            wr.writerow([int(row[0])] + [repr(float(x)) for x in row[1:]])


def read_history(path) -> list:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        next(rd)
        return [[int(r[0])] + [float(x) for x in r[1:]] for r in rd]
