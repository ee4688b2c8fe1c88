"""Latent-conditioned tri-plane radiance field.

``z -> w`` through an 8-layer mapping MLP and per-layer affine heads, a small
modulated convolution stack turns a learned constant grid into three
axis-aligned feature planes, and a single sinusoidal layer decodes summed
bilinear plane features (conditioned on the mean style vector) to density
and colour.

Everything is batched over objects: latents ``(B, z_dim)``, styles
``(B, L, w_dim)``, planes ``(B, 3, C, N, N)`` and query points ``(B, M, 3)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

LRELU_SLOPE = 0.2
DOMAIN_TOL = 1e-6


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    z_dim: int = 64
    w_dim: int = 64
    mapping_layers: int = 8
    num_styles: int = 8
    plane_res: int = 64
    plane_channels: int = 16
    base_res: int = 8
    synth_channels: int = 32
    decoder_hidden: int = 32
    omega0: float = 10.0
    density_scale: float = 10.0
    seed: int = 0

    def __post_init__(self):
        ratio = self.plane_res / self.base_res
        if ratio < 1 or ratio != 2 ** round(math.log2(ratio)):
            raise ConfigError("plane_res must be base_res times a power of two")
        if self.num_styles < 1 or self.mapping_layers < 1:
            raise ConfigError("need at least one style layer and one mapping layer")

    @property
    def num_stages(self) -> int:
        return int(round(math.log2(self.plane_res / self.base_res)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _uniform(rng, shape, bound):
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


class StyleAffine(nn.Module):
    """Per-channel gain/shift from one style vector (gain bias starts at 1)."""

    def __init__(self, w_dim, channels, rng):
        super().__init__()
        self.weight = nn.Parameter(_uniform(rng, (2 * channels, w_dim), math.sqrt(3.0 / w_dim)) * 0.1)
        self.bias = nn.Parameter(torch.cat([torch.ones(channels), torch.zeros(channels)]).double())
        self.channels = channels

    def forward(self, w):
        gb = F.linear(w, self.weight, self.bias)
        return gb[:, : self.channels], gb[:, self.channels :]


class ModConv(nn.Module):
    def __init__(self, cin, cout, k, w_dim, rng, activate=True):
        super().__init__()
        fan_in = cin * k * k
        self.weight = nn.Parameter(_uniform(rng, (cout, cin, k, k), math.sqrt(6.0 / fan_in)))
        self.bias = nn.Parameter(torch.zeros(cout, dtype=torch.float64))
        self.affine = StyleAffine(w_dim, cout, rng)
        self.activate = activate
        self.pad = k // 2

    def forward(self, x, w, modulate=True):
        y = F.conv2d(x, self.weight, self.bias, padding=self.pad)
        if modulate:
            gain, shift = self.affine(w)
            y = y * gain[:, :, None, None] + shift[:, :, None, None]
        return F.leaky_relu(y, LRELU_SLOPE) if self.activate else y


class TriPlaneGenerator(nn.Module):
    """Parameters θ of the shared field.  Parameter order is declaration order."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        cfg = config or GeneratorConfig()
        self.config = cfg
        rng = np.random.default_rng([cfg.seed, 0x5EED])

        # mapping network
        self.mapping = nn.ModuleList()
        for i in range(cfg.mapping_layers):
            fan_in = cfg.z_dim if i == 0 else cfg.w_dim
            lin = nn.Linear(fan_in, cfg.w_dim).double()
            with torch.no_grad():
                lin.weight.copy_(_uniform(rng, (cfg.w_dim, fan_in), math.sqrt(6.0 / fan_in)))
                lin.bias.zero_()
            self.mapping.append(lin)
        self.style_heads = nn.Parameter(_uniform(rng, (cfg.num_styles, cfg.w_dim, cfg.w_dim), math.sqrt(3.0 / cfg.w_dim)))
        self.style_bias = nn.Parameter(torch.zeros(cfg.num_styles, cfg.w_dim, dtype=torch.float64))

        # synthesis network
        ch = cfg.synth_channels
        self.base = nn.Parameter(torch.from_numpy(rng.normal(0.0, 0.02, (ch, cfg.base_res, cfg.base_res))))
        self.base_conv = ModConv(ch, ch, 3, cfg.w_dim, rng)
        self.stages = nn.ModuleList()
        for _ in range(cfg.num_stages):
            self.stages.append(nn.ModuleList([ModConv(ch, ch, 3, cfg.w_dim, rng), ModConv(ch, ch, 3, cfg.w_dim, rng)]))
        self.to_planes = ModConv(ch, 3 * cfg.plane_channels, 1, cfg.w_dim, rng, activate=False)

        # sinusoidal decoder
        C, H = cfg.plane_channels, cfg.decoder_hidden
        self.sine_feat = nn.Parameter(_uniform(rng, (H, C), 1.0 / C))
        self.sine_style = nn.Parameter(_uniform(rng, (H, cfg.w_dim), 1.0 / cfg.w_dim))
        self.sine_bias = nn.Parameter(torch.zeros(H, dtype=torch.float64))
        bound = math.sqrt(6.0 / H) / cfg.omega0
        self.sigma_head = nn.Parameter(_uniform(rng, (1, H), bound))
        self.sigma_bias = nn.Parameter(torch.zeros(1, dtype=torch.float64))
        self.color_head = nn.Parameter(_uniform(rng, (3, H), bound))
        self.color_bias = nn.Parameter(torch.zeros(3, dtype=torch.float64))
        self.float()

    @property
    def dtype(self):
        return self.base.dtype

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- mapping ---------------------------------------------------------
    def map(self, z):
        """(B, z_dim) -> (B, L, w_dim)."""
        if z.shape[-1] != self.config.z_dim:
            raise ConfigError(f"latent has dimension {z.shape[-1]}, expected {self.config.z_dim}")
        h = z
        for lin in self.mapping:
            h = F.leaky_relu(lin(h), LRELU_SLOPE)
        return torch.einsum("lij,bj->bli", self.style_heads, h) + self.style_bias

    def mapping_lipschitz_bound(self) -> float:
        """Product of layer spectral norms times the largest style-head norm."""
        bound = 1.0
        with torch.no_grad():
            for lin in self.mapping:
                bound *= float(torch.linalg.matrix_norm(lin.weight.double(), ord=2))
            stacked = self.style_heads.double().reshape(-1, self.config.w_dim)
            bound *= float(torch.linalg.matrix_norm(stacked, ord=2))
        return bound

    # -- synthesis -------------------------------------------------------
    def _style(self, w, k):
        return w[:, min(k, w.shape[1] - 1)]

    def synthesize(self, w, modulate=True):
        """(B, L, w_dim) -> planes (B, 3, C, N, N)."""
        if w.dim() != 3 or w.shape[-1] != self.config.w_dim:
            raise ConfigError(f"style tensor has shape {tuple(w.shape)}")
        B = w.shape[0]
        x = self.base.unsqueeze(0).expand(B, -1, -1, -1)
        x = self.base_conv(x, self._style(w, 0), modulate)
        k = 1
        for conv_a, conv_b in self.stages:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = conv_a(x, self._style(w, k), modulate)
            x = conv_b(x, self._style(w, k + 1), modulate)
            k += 2
        x = self.to_planes(x, self._style(w, k), modulate)
        N, C = self.config.plane_res, self.config.plane_channels
        return x.view(B, 3, C, N, N)

    # -- decoding --------------------------------------------------------
    def features(self, planes, x):
        """Summed bilinear features of points ``x`` (B, M, 3) -> (B, M, C).

        Plane 0 is indexed by (x, y), plane 1 by (x, z), plane 2 by (y, z);
        the first coordinate runs along the plane's row axis.
        """
        B, _, C, N, _ = planes.shape
        M = x.shape[1]
        # grid_sample wants (column, row) ordering
        grid = torch.stack([x[..., [1, 0]], x[..., [2, 0]], x[..., [2, 1]]], dim=1).reshape(B * 3, M, 1, 2)
        out = F.grid_sample(planes.reshape(B * 3, C, N, N), grid, mode="bilinear",
                            padding_mode="border", align_corners=True)
        return out.view(B, 3, C, M).sum(dim=1).transpose(1, 2)

    def features_reference(self, planes, x):
        """Gather-based evaluation of :meth:`features` (slower; used as a cross-check)."""
        return (
            bilinear(planes[:, 0], x[..., 0], x[..., 1])
            + bilinear(planes[:, 1], x[..., 0], x[..., 2])
            + bilinear(planes[:, 2], x[..., 1], x[..., 2])
        )

    def decode(self, feat, w):
        """Features (B, M, C) and styles (B, L, w_dim) -> (sigma (B, M), rgb (B, M, 3), hidden)."""
        cfg = self.config
        cond = F.linear(w.mean(dim=1), self.sine_style)  # (B, H)
        pre = F.linear(feat, self.sine_feat, self.sine_bias) + cond[:, None, :]
        h = torch.sin(cfg.omega0 * pre)
        sigma = F.softplus(cfg.density_scale * F.linear(h, self.sigma_head, self.sigma_bias)[..., 0])
        rgb = torch.sigmoid(F.linear(h, self.color_head, self.color_bias))
        return sigma, rgb, h

    def query(self, planes, x, w, check=True):
        if check:
            with torch.no_grad():
                if x.numel() and float(x.abs().max()) > 1 + DOMAIN_TOL:
                    raise DomainError("query point outside [-1, 1]^3; clip rays with ray_aabb first")
        x = x.clamp(-1.0, 1.0)
        feat = self.features(planes, x)
        sigma, rgb, _ = self.decode(feat, w)
        return sigma, rgb, feat


class DomainError(ValueError):
    pass


def bilinear(plane, a, b):
    """Sample ``plane`` (B, C, N, N) at coordinates ``a`` (first grid axis) and
    ``b`` (second axis), both (B, M) in [-1, 1], nodes at ``-1 + 2k/(N-1)``.
    """
    B, C, N, _ = plane.shape
    ga = (a + 1.0) * (0.5 * (N - 1))
    gb = (b + 1.0) * (0.5 * (N - 1))
    ia = ga.detach().floor().clamp(0, N - 2)
    ib = gb.detach().floor().clamp(0, N - 2)
    fa = (ga - ia).unsqueeze(-1)
    fb = (gb - ib).unsqueeze(-1)
    ia = ia.long()
    ib = ib.long()
    flat = plane.reshape(B, C, N * N).transpose(1, 2)  # (B, N*N, C)
    base = ia * N + ib

    def take(idx):
        return torch.gather(flat, 1, idx.unsqueeze(-1).expand(-1, -1, C))

    v00 = take(base)
    v01 = take(base + 1)
    v10 = take(base + N)
    v11 = take(base + N + 1)
    return (v00 * (1 - fb) + v01 * fb) * (1 - fa) + (v10 * (1 - fb) + v11 * fb) * fa


# -- functional surface ----------------------------------------------------


@dataclass
class TriPlaneField:
    """Planes of one or more objects bound to the decoder that reads them."""

    planes: torch.Tensor
    generator: TriPlaneGenerator = field(repr=False)

    @property
    def resolution(self) -> int:
        return self.planes.shape[-1]

    @property
    def channels(self) -> int:
        return self.planes.shape[2]


def map_latent(gen: TriPlaneGenerator, z):
    z = torch.as_tensor(z, dtype=gen.dtype)
    return gen.map(z.unsqueeze(0) if z.dim() == 1 else z)


def synthesize_planes(gen: TriPlaneGenerator, w, modulate=True) -> TriPlaneField:
    w = torch.as_tensor(w, dtype=gen.dtype)
    return TriPlaneField(gen.synthesize(w.unsqueeze(0) if w.dim() == 2 else w, modulate), gen)


def query_field(field: TriPlaneField, x, w):
    """Density, colour and summed features at points ``x`` ((M, 3) or (B, M, 3))."""
    gen = field.generator
    x = torch.as_tensor(x, dtype=gen.dtype)
    w = torch.as_tensor(w, dtype=gen.dtype)
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if w.dim() == 2:
        w = w.unsqueeze(0)
    sigma, rgb, feat = gen.query(field.planes, x, w)
    if single:
        return sigma[0], rgb[0], feat[0]
    return sigma, rgb, feat
