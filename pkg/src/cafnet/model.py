"""Two-stage radar-camera depth network with confidence-aware gated fusion.

Stage 1 encodes the image and the (sparse-conv preprocessed) radar image, and a UNet
decoder predicts a coarse depth map and a radar confidence map. The refinement step
keeps coarse depth only where confidence clears a threshold; that channel joins the
radar image as input to a second radar encoder. The stage-2 decoder fuses those radar
features with the stage-1 image features at every scale and predicts the final depth.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import torch
from torch import nn

from .confidence import C_R
from .errors import ConfigError
from .ops import ResidualBlock, SparseConv, avg_pool_stride, concat, conv2d, relu, sigmoid, upsample2x

FUSION_VARIANTS = ("cagf", "gf", "add", "concat")

# Fixed input scaling for [depth, vx, vy, rcs, valid] and for depth-valued channels.
RADAR_SCALE = (1 / 80.0, 1 / 10.0, 1 / 10.0, 1 / 20.0, 1.0)
DEPTH_SCALE = 1 / 80.0


@dataclass
class ModelConfig:
    scales: int = 4
    image_widths: tuple = (16, 32, 64, 128)
    radar_widths: tuple = (8, 16, 32, 64)
    radar2_widths: tuple | None = None  # stage-2 radar encoder; defaults to radar_widths
    decoder_widths: tuple = (16, 32, 64, 128)
    head_width: int = 16
    scm_channels: int = 16
    scm_layers: int = 4
    d_min: float = 0.001
    d_max: float = 80.0
    threshold: float = 0.4
    fusion: str = "cagf"
    use_scm: bool = True
    use_rm: bool = True
    use_confidence: bool = True

    def __post_init__(self):
        for name in ("image_widths", "radar_widths", "radar2_widths", "decoder_widths"):
            value = getattr(self, name)
            if value is not None:
                value = tuple(int(v) for v in value)
                if len(value) != self.scales:
                    raise ConfigError(f"{name} needs {self.scales} entries, got {len(value)}")
                setattr(self, name, value)
        if self.radar2_widths is None:
            self.radar2_widths = self.radar_widths
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion must be one of {FUSION_VARIANTS}, got {self.fusion!r}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        if not 0 < self.d_min < self.d_max:
            raise ConfigError("need 0 < d_min < d_max")
        if self.fusion == "cagf" and not self.use_confidence:
            raise ConfigError("cagf fusion needs the confidence head (use_confidence=True)")
        if self.fusion == "add" and self.radar2_widths != self.image_widths:
            raise ConfigError("add fusion needs stage-2 radar widths equal to image widths")

    @property
    def divisor(self) -> int:
        return 2 ** self.scales

    def check_dims(self, height: int, width: int) -> None:
        if height % self.divisor or width % self.divisor:
            raise ConfigError(f"input {height}x{width} not divisible by {self.divisor}; pad or crop first")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


class ForwardOutput(NamedTuple):
    coarse: torch.Tensor
    confidence: torch.Tensor | None
    refined: torch.Tensor
    final: torch.Tensor
    radar_input: torch.Tensor


def depth_activation(logit: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    return d_min + (d_max - d_min) * sigmoid(logit)


def refine(coarse: torch.Tensor, confidence: torch.Tensor, threshold: float) -> torch.Tensor:
    """Zero coarse depth where confidence < threshold. The mask carries no gradient."""
    keep = (confidence >= threshold).to(coarse.dtype).detach()
    return keep * coarse


def cagf_fuse(f_r: torch.Tensor, f_c: torch.Tensor, confidence: torch.Tensor | None, scale: int,
              p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Gate radar features by ``sigmoid(p . F_r)``, project with ``q``, weight by the
    block-averaged confidence and add to the image features.

    ``confidence`` is full resolution (N x 1 x H x W) and pooled with stride ``2**scale``;
    ``None`` drops the confidence factor (plain gated fusion).
    """
    if q.shape != (f_r.shape[1], f_c.shape[1]) or p.shape != (f_r.shape[1],):
        raise ConfigError(f"fusion parameter shapes p{tuple(p.shape)}, q{tuple(q.shape)} do not match "
                          f"radar channels {f_r.shape[1]} / image channels {f_c.shape[1]}")
    alpha = sigmoid(torch.einsum("c,nchw->nhw", p, f_r)).unsqueeze(1)
    beta = torch.einsum("cd,nchw->ndhw", q, f_r)
    radar = alpha * beta
    if confidence is not None:
        radar = radar * avg_pool_stride(confidence, 2 ** scale)
    return radar + f_c


class Fusion(nn.Module):
    def __init__(self, variant: str, radar_channels: int, image_channels: int):
        super().__init__()
        self.variant = variant
        if variant in ("cagf", "gf"):
            self.p = nn.Parameter(torch.empty(radar_channels))
            self.q = nn.Parameter(torch.empty(radar_channels, image_channels))
        elif variant == "concat":
            self.proj = nn.Conv2d(radar_channels + image_channels, image_channels, 1)
        elif variant == "add" and radar_channels != image_channels:
            raise ConfigError(f"add fusion needs equal channels, got {radar_channels} and {image_channels}")

    def forward(self, f_r, f_c, confidence, scale):
        if self.variant == "cagf":
            return cagf_fuse(f_r, f_c, confidence, scale, self.p, self.q)
        if self.variant == "gf":
            return cagf_fuse(f_r, f_c, None, scale, self.p, self.q)
        if self.variant == "add":
            return f_r + f_c
        return self.proj(concat(f_r, f_c))


class Encoder(nn.Module):
    """Strided residual encoder; returns features at strides 2, 4, ..., 2**scales."""

    def __init__(self, in_channels: int, widths):
        super().__init__()
        stages, prev = [], in_channels
        for w in widths:
            stages.append(nn.Sequential(nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.ReLU(), ResidualBlock(w)))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class SparseConvModule(nn.Module):
    """Stack of sparse convolutions with relu between layers."""

    def __init__(self, in_channels: int, channels: int, layers: int = 4):
        super().__init__()
        self.layers = nn.ModuleList(
            [SparseConv(in_channels if i == 0 else channels, channels) for i in range(layers)])

    def forward(self, x, mask):
        for i, layer in enumerate(self.layers):
            x, mask = layer(x, mask)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x


class Decoder(nn.Module):
    """Coarse-to-fine decoder: one conv per scale over [upsampled, skip] and a full-res conv."""

    def __init__(self, skip_channels, widths, head_width: int):
        super().__init__()
        n = len(widths)
        self.blocks = nn.ModuleList()
        for i in reversed(range(n)):
            in_ch = skip_channels[i] + (widths[i + 1] if i + 1 < n else 0)
            self.blocks.append(nn.Conv2d(in_ch, widths[i], 3, padding=1))
        self.full = nn.Conv2d(widths[0], head_width, 3, padding=1)

    def forward(self, skips):
        x = None
        for conv, skip in zip(self.blocks, reversed(skips)):
            x = skip if x is None else concat(upsample2x(x), skip)
            x = relu(conv(x))
        return relu(self.full(upsample2x(x)))


class CaFNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.register_buffer("radar_scale", torch.tensor(RADAR_SCALE).view(1, C_R, 1, 1), persistent=False)

        self.image_encoder = Encoder(3, cfg.image_widths)
        if cfg.use_scm:
            self.scm = SparseConvModule(C_R, cfg.scm_channels, cfg.scm_layers)
        self.radar_encoder = Encoder(cfg.scm_channels if cfg.use_scm else C_R, cfg.radar_widths)
        skips = [a + b for a, b in zip(cfg.image_widths, cfg.radar_widths)]
        self.decoder1 = Decoder(skips, cfg.decoder_widths, cfg.head_width)
        self.depth_head1 = nn.Conv2d(cfg.head_width, 1, 3, padding=1)
        if cfg.use_confidence:
            self.conf_head = nn.Conv2d(cfg.head_width, 1, 3, padding=1)

        self.radar_encoder2 = Encoder(self.stage2_in_channels, cfg.radar2_widths)
        self.fusions = nn.ModuleList(
            [Fusion(cfg.fusion, r, c) for r, c in zip(cfg.radar2_widths, cfg.image_widths)])
        self.decoder2 = Decoder(cfg.image_widths, cfg.decoder_widths, cfg.head_width)
        self.depth_head2 = nn.Conv2d(cfg.head_width, 1, 3, padding=1)
        init_parameters(self, seed)

    @property
    def stage2_in_channels(self) -> int:
        cfg = self.config
        return C_R + (2 if cfg.use_confidence and not cfg.use_rm else 1)

    def _depth(self, logit):
        return depth_activation(logit, self.config.d_min, self.config.d_max)

    def encode_image(self, image: torch.Tensor):
        return self.image_encoder((image - 0.5) / 0.25)

    def stage1(self, image: torch.Tensor, radar: torch.Tensor, image_feats=None):
        """Returns ``(coarse, confidence, image_feats)``; confidence is None without its head."""
        self.config.check_dims(*image.shape[-2:])
        if image.shape[-2:] != radar.shape[-2:]:
            raise ConfigError(f"image {tuple(image.shape)} and radar {tuple(radar.shape)} sizes differ")
        if image_feats is None:
            image_feats = self.encode_image(image)
        r = radar * self.radar_scale
        if self.config.use_scm:
            r = self.scm(r, radar[:, C_R - 1:C_R])
        radar_feats = self.radar_encoder(r)
        x = self.decoder1([concat(c, f) for c, f in zip(image_feats, radar_feats)])
        coarse = self._depth(self.depth_head1(x))
        conf = sigmoid(self.conf_head(x)) if self.config.use_confidence else None
        return coarse, conf, image_feats

    def radar_input(self, radar, coarse, conf):
        """R' = [R, refined coarse depth] (or [R, coarse, confidence] without refinement)."""
        cfg = self.config
        if not cfg.use_confidence:
            refined = coarse
            return concat(radar, coarse), refined
        if not cfg.use_rm:
            return concat(radar, coarse, conf), coarse
        refined = refine(coarse, conf, cfg.threshold)
        return concat(radar, refined), refined

    def stage2(self, image_feats, radar_input, conf, return_features: bool = False):
        scale = torch.cat([self.radar_scale.to(radar_input.dtype),
                           torch.full((1, radar_input.shape[1] - C_R, 1, 1), DEPTH_SCALE,
                                      dtype=radar_input.dtype)], dim=1)
        if self.config.use_confidence and not self.config.use_rm:
            scale[:, -1] = 1.0
        radar_feats = self.radar_encoder2(radar_input * scale)
        fused = [fuse(f_r, f_c, conf, i + 1)
                 for i, (fuse, f_r, f_c) in enumerate(zip(self.fusions, radar_feats, image_feats))]
        final = self._depth(self.depth_head2(self.decoder2(fused)))
        return (final, fused) if return_features else final

    def forward(self, image: torch.Tensor, radar: torch.Tensor) -> ForwardOutput:
        coarse, conf, image_feats = self.stage1(image, radar)
        r_prime, refined = self.radar_input(radar, coarse, conf)
        final = self.stage2(image_feats, r_prime, conf)
        return ForwardOutput(coarse, conf, refined, final, r_prime)


def _param_generator(seed: int, name: str) -> torch.Generator:
    return torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % (2 ** 62))


@torch.no_grad()
def init_parameters(model: nn.Module, seed: int) -> None:
    """Initialise every parameter from a generator keyed on (seed, parameter name), so a
    submodule's weights do not depend on which other submodules exist."""
    initial_depth = 20.0
    for name, p in model.named_parameters():
        g = _param_generator(seed, name)
        if name.endswith("bias"):
            p.zero_()
            if name.startswith("depth_head"):
                cfg = model.config
                frac = (initial_depth - cfg.d_min) / (cfg.d_max - cfg.d_min)
                p.fill_(math.log(frac / (1 - frac)))
        elif p.dim() == 4:
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            if name.startswith("scm."):
                # Normalised convs average over the valid footprint: fan-in is the channel count.
                fan_in = p.shape[1]
            std = math.sqrt(2.0 / fan_in) * (0.1 if "head" in name else 1.0)
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * std)
        else:
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) / math.sqrt(p.shape[0]))
