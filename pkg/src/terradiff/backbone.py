"""Frozen denoiser trunk with per-site conditioning hooks.

A compact encoder/middle/decoder U-Net predicts the noise added to a
3-channel patch.  Every residual block routes its mid-activation through an
adaptive group-norm site; the trunk never owns those scale/shift parameters,
it only asks a caller-supplied function for them by site name.  Decoder
residual-block outputs are the feature taps used downstream.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import (
    FiLMConditioner,
    FiLMParams,
    Modality,
    adaptive_group_norm,
    norm_groups,
)
from .schedule import NoiseSchedule, q_sample

TRAINABLE_PREFIX = "conditioner."


@dataclass(frozen=True)
class DenoiserConfig:
    """Static architecture description.

    Attention placement is fixed at construction from ``image_size``: levels
    whose nominal resolution (image_size / 2^level) is listed in
    ``attention_resolutions`` get attention blocks.  Inputs of other sizes are
    accepted at runtime as long as they remain divisible by the total
    downsampling factor.
    """

    image_size: int = 64
    base_width: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (16,)
    cond_width: int = 96
    in_channels: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        object.__setattr__(
            self, "attention_resolutions", tuple(int(r) for r in self.attention_resolutions)
        )
        if self.base_width < 1 or self.num_res_blocks < 1 or self.in_channels < 1:
            raise ValueError("base_width, num_res_blocks and in_channels must be positive")
        if not self.channel_mults:
            raise ValueError("channel_mults must be non-empty")
        factor = self.downsample_factor
        if self.image_size % factor != 0:
            raise ValueError(f"image_size {self.image_size} not divisible by {factor}")
        if self.cond_width < 2 or self.cond_width % 2 != 0:
            raise ValueError("cond_width must be an even integer >= 2")

    @property
    def levels(self) -> int:
        return len(self.channel_mults)

    @property
    def downsample_factor(self) -> int:
        return 2 ** (self.levels - 1)

    def attention_levels(self) -> tuple[int, ...]:
        res = {self.image_size // (2**i): i for i in range(self.levels)}
        return tuple(sorted(res[r] for r in self.attention_resolutions if r in res))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


@dataclass
class FeatureMap:
    """One tap activation, upsampled to the patch grid."""

    values: torch.Tensor  # (C_f, S, S)
    source: tuple[int, int, Modality]  # (layer, timestep, modality)


@dataclass(frozen=True)
class ParamPartition:
    """Names and element counts of the frozen trunk vs the trainable conditioner."""

    frozen: tuple[str, ...]
    trainable: tuple[str, ...]
    frozen_count: int
    trainable_count: int

    @property
    def total_count(self) -> int:
        return self.frozen_count + self.trainable_count

    @property
    def trainable_ratio(self) -> float:
        return self.trainable_count / self.total_count


class ResBlock(nn.Module):
    """norm -> SiLU -> conv -> conditioned norm -> SiLU -> conv, plus skip."""

    def __init__(self, in_ch: int, out_ch: int, site: str) -> None:
        super().__init__()
        self.site = site
        self.out_ch = out_ch
        self.norm1 = nn.GroupNorm(norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, film_fn=None) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        params: FiLMParams | None = film_fn(self.site) if film_fn is not None else None
        h = adaptive_group_norm(h, params)
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention over spatial positions, residual form."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(norm_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserBackbone(nn.Module):
    """The trunk.  Holds no conditioning parameters; ``film_fn`` supplies them."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        attn_levels = set(config.attention_levels())
        ch = config.base_width
        self.stem = nn.Conv2d(config.in_channels, ch, 3, padding=1)

        # site name -> mid-activation channel count; insertion order is the
        # forward traversal order.
        self.site_channels: dict[str, int] = {}
        skip_chs = [ch]

        self.encoder = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        for level, mult in enumerate(config.channel_mults):
            out_ch = config.base_width * mult
            for b in range(config.num_res_blocks):
                name = f"enc{level}_b{b}"
                self.encoder.append(ResBlock(ch, out_ch, name))
                self.enc_attn.append(
                    AttentionBlock(out_ch) if level in attn_levels else nn.Identity()
                )
                self.site_channels[name] = out_ch
                ch = out_ch
                skip_chs.append(ch)
            if level < config.levels - 1:
                self.encoder.append(Downsample(ch))
                self.enc_attn.append(nn.Identity())
                skip_chs.append(ch)

        self.mid_block1 = ResBlock(ch, ch, "mid_b0")
        self.mid_attn = AttentionBlock(ch)
        self.mid_block2 = ResBlock(ch, ch, "mid_b1")
        self.site_channels["mid_b0"] = ch
        self.site_channels["mid_b1"] = ch

        # Decoder blocks consume skips in reverse push order; tap index runs
        # over decoder residual blocks from the bottleneck outward.
        self.decoder = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.dec_upsample = nn.ModuleDict()
        self.dec_levels: list[int] = []
        self.tap_channels: list[int] = []
        for level in reversed(range(config.levels)):
            out_ch = config.base_width * config.channel_mults[level]
            for b in range(config.num_res_blocks + 1):
                name = f"dec{level}_b{b}"
                self.decoder.append(ResBlock(ch + skip_chs.pop(), out_ch, name))
                self.dec_attn.append(
                    AttentionBlock(out_ch) if level in attn_levels else nn.Identity()
                )
                self.dec_levels.append(level)
                self.site_channels[name] = out_ch
                self.tap_channels.append(out_ch)
                ch = out_ch
            if level > 0:
                self.dec_upsample[str(level)] = Upsample(ch)
        assert not skip_chs, "skip accounting must balance"

        self.out_norm = nn.GroupNorm(norm_groups(ch), ch)
        self.out_conv = nn.Conv2d(ch, config.in_channels, 3, padding=1)

    @property
    def num_taps(self) -> int:
        return len(self.tap_channels)

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        factor = self.config.downsample_factor
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ValueError(f"spatial dims {x.shape[2:]} not divisible by {factor}")

    def forward(self, x: torch.Tensor, film_fn=None, tap: int | None = None):
        self._check_input(x)
        if tap is not None and not 0 <= tap < self.num_taps:
            raise ValueError(f"tap index {tap} outside [0, {self.num_taps})")

        h = self.stem(x)
        skips = [h]
        for module, attn in zip(self.encoder, self.enc_attn):
            h = module(h, film_fn) if isinstance(module, ResBlock) else module(h)
            h = attn(h)
            skips.append(h)

        h = self.mid_block1(h, film_fn)
        h = self.mid_attn(h)
        h = self.mid_block2(h, film_fn)

        tapped: torch.Tensor | None = None
        blocks_per_level = self.config.num_res_blocks + 1
        for i, (module, attn, level) in enumerate(
            zip(self.decoder, self.dec_attn, self.dec_levels)
        ):
            h = module(torch.cat([h, skips.pop()], dim=1), film_fn)
            if tap is not None and i == tap:
                tapped = h
            h = attn(h)
            if level > 0 and i % blocks_per_level == blocks_per_level - 1:
                h = self.dec_upsample[str(level)](h)

        eps_hat = self.out_conv(F.silu(self.out_norm(h)))
        return eps_hat if tap is None else (eps_hat, tapped)


class DenoiserModel(nn.Module):
    """Trunk plus its conditioner.  Parameter names under ``conditioner.`` are
    the trainable set; everything else is the frozen trunk."""

    def __init__(self, config: DenoiserConfig, num_timesteps: int = 1000) -> None:
        super().__init__()
        self.config = config
        self.num_timesteps = num_timesteps
        self.backbone = DenoiserBackbone(config)
        self.conditioner = FiLMConditioner(
            sites=self.backbone.site_channels,
            cond_width=config.cond_width,
            num_timesteps=num_timesteps,
        )

    @property
    def num_taps(self) -> int:
        return self.backbone.num_taps

    def forward(self, x: torch.Tensor, t, m, tap: int | None = None):
        film_fn = self.conditioner.film_fn(t, m, batch=x.shape[0])
        return self.backbone(x, film_fn, tap=tap)

    def predict_noise(self, x: torch.Tensor, t, m) -> torch.Tensor:
        """Noise estimate for a single patch (3, S, S) or a batch (N, 3, S, S)."""
        single = x.ndim == 3
        if single:
            x = x.unsqueeze(0)
        out = self.forward(x, t, m)
        return out[0] if single else out


def build_model(
    config: DenoiserConfig,
    seed: int = 0,
    num_timesteps: int = 1000,
) -> DenoiserModel:
    """Deterministically construct a model: seeded trunk init, identity-state
    conditioner, partition flags applied."""
    torch.manual_seed(seed)
    model = DenoiserModel(config, num_timesteps=num_timesteps)
    model.conditioner.reset_identity()
    partition_parameters(model)
    return model


def partition_parameters(model: DenoiserModel) -> ParamPartition:
    """Freeze the trunk, mark the conditioner trainable, and report counts."""
    frozen: list[str] = []
    trainable: list[str] = []
    frozen_count = 0
    trainable_count = 0
    for name, p in model.named_parameters():
        if name.startswith(TRAINABLE_PREFIX):
            p.requires_grad_(True)
            trainable.append(name)
            trainable_count += p.numel()
        else:
            p.requires_grad_(False)
            frozen.append(name)
            frozen_count += p.numel()
    return ParamPartition(
        frozen=tuple(frozen),
        trainable=tuple(trainable),
        frozen_count=frozen_count,
        trainable_count=trainable_count,
    )


def frozen_hashes(model: DenoiserModel) -> dict[str, str]:
    """SHA-256 of every frozen parameter's raw float32 bytes."""
    out: dict[str, str] = {}
    for name, p in model.named_parameters():
        if not name.startswith(TRAINABLE_PREFIX):
            data = p.detach().cpu().contiguous().to(torch.float32).numpy()
            out[name] = hashlib.sha256(data.tobytes()).hexdigest()
    return out


def features_batch(
    model: DenoiserModel,
    x: torch.Tensor,
    t: int,
    m,
    layer: int,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
    eps: torch.Tensor | None = None,
    chunk: int = 16,
) -> torch.Tensor:
    """Tap activations for a batch of patches, bilinearly upsampled to the
    input resolution.  Noise for t > 0 is drawn once for the whole batch (or
    passed explicitly) so results do not depend on chunking."""
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, S, S), got {tuple(x.shape)}")
    t = sched.validate_timestep(t)
    if not 0 <= layer < model.num_taps:
        raise ValueError(f"layer {layer} outside [0, {model.num_taps})")
    if t > 0:
        if eps is None:
            eps = torch.randn(x.shape, generator=rng, dtype=x.dtype)
        elif eps.shape != x.shape:
            raise ValueError("eps must match the patch batch shape")
        x_t = q_sample(x, t, eps, sched)
    else:
        x_t = x
    outs = []
    with torch.no_grad():
        for start in range(0, x_t.shape[0], chunk):
            piece = x_t[start : start + chunk]
            _, act = model(piece, t, m, tap=layer)
            outs.append(
                F.interpolate(act, size=x.shape[2:], mode="bilinear", align_corners=False)
            )
    return torch.cat(outs, dim=0)


def extract_features(
    model: DenoiserModel,
    x: torch.Tensor,
    t: int,
    m,
    layer: int,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> FeatureMap:
    """Feature map for one patch (3, S, S) at tap ``layer``, conditioned on
    (t, m).  For t > 0 the patch is noised first; pass a seeded generator for
    reproducible noise."""
    if x.ndim != 3:
        raise ValueError(f"expected a single (C, S, S) patch, got {tuple(x.shape)}")
    values = features_batch(model, x.unsqueeze(0), t, m, layer, sched, rng=rng)[0]
    return FeatureMap(values=values, source=(layer, int(t), Modality(int(m))))


@torch.no_grad()
def sample_patches(
    model: DenoiserModel,
    m,
    n: int,
    sched: NoiseSchedule,
    seed: int = 0,
    size: int | None = None,
) -> torch.Tensor:
    """Ancestral sampling from pure noise down to t = 0; returns (n, C, S, S)
    clamped to [-1, 1]."""
    if n < 1:
        raise ValueError("n must be >= 1")
    size = model.config.image_size if size is None else size
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(n, model.config.in_channels, size, size, generator=g)
    ab = sched.alpha_bar
    for t in range(sched.timesteps, 0, -1):
        beta_t = sched.beta[t - 1]
        alpha_t = 1.0 - beta_t
        eps_hat = model(x, t, m)
        x0_hat = (x - math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(ab[t])
        x0_hat = x0_hat.clamp(-1.0, 1.0)
        mean = (
            math.sqrt(ab[t - 1]) * beta_t / (1.0 - ab[t]) * x0_hat
            + math.sqrt(alpha_t) * (1.0 - ab[t - 1]) / (1.0 - ab[t]) * x
        )
        if t > 1:
            var = beta_t * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = mean + math.sqrt(var) * torch.randn(x.shape, generator=g)
        else:
            x = mean
    return x.clamp(-1.0, 1.0)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
