"""x4 RRDB super-resolution generator."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ShapeError


@dataclass(frozen=True)
class GeneratorConfig:
    num_rrdb_blocks: int = 6
    base_channels: int = 64
    growth_channels: int = 32
    residual_scale: float = 0.2
    negative_slope: float = 0.2
    upscale: int = 4

    def __post_init__(self):
        if self.num_rrdb_blocks < 1:
            raise ValueError("num_rrdb_blocks must be >= 1")
        if not self.base_channels >= self.growth_channels >= 1:
            raise ValueError("need base_channels >= growth_channels >= 1")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ValueError("residual_scale must lie in (0, 1]")
        if self.upscale != 4:
            raise ValueError("only x4 upscaling is supported")

    @classmethod
    def full_scale(cls) -> "GeneratorConfig":
        return cls(num_rrdb_blocks=23)


def _scaled_kaiming(module: nn.Module, scale: float) -> None:
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, a=0, mode="fan_in")
            m.weight.data.mul_(scale)
            nn.init.zeros_(m.bias)


class ResidualDenseBlock(nn.Module):
    """Five densely connected 3x3 convs; the last one feeds a scaled residual."""

    def __init__(self, channels: int, growth: int, residual_scale: float = 0.2, negative_slope: float = 0.2):
        super().__init__()
        self.residual_scale = residual_scale
        for i in range(5):
            out = channels if i == 4 else growth
            self.add_module(f"conv{i + 1}", nn.Conv2d(channels + i * growth, out, 3, 1, 1))
        self.act = nn.LeakyReLU(negative_slope)
        _scaled_kaiming(self, 0.1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats = [x]
        for i in range(1, 5):
            feats.append(self.act(getattr(self, f"conv{i}")(torch.cat(feats, 1))))
        return x + self.residual_scale * self.conv5(torch.cat(feats, 1))


class RRDB(nn.Module):
    """Residual-in-residual dense block: ``x + s * residual(x)``.

    ``residual(x)`` is the output of three chained dense blocks with the chain's
    own identity path removed, so zeroing every dense block's last conv makes
    the whole block an exact identity.
    """

    def __init__(self, channels: int, growth: int, residual_scale: float = 0.2, negative_slope: float = 0.2):
        super().__init__()
        self.channels = channels
        self.residual_scale = residual_scale
        self.rdb1 = ResidualDenseBlock(channels, growth, residual_scale, negative_slope)
        self.rdb2 = ResidualDenseBlock(channels, growth, residual_scale, negative_slope)
        self.rdb3 = ResidualDenseBlock(channels, growth, residual_scale, negative_slope)

    def residual(self, x: torch.Tensor) -> torch.Tensor:
        return self.rdb3(self.rdb2(self.rdb1(x))) - x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"RRDB expects {self.channels} channels, got shape {tuple(x.shape)}")
        return x + self.residual_scale * self.residual(x)


class Generator(nn.Module):
    """LR (B, 3, H, W) -> SR (B, 3, 4H, 4W); outputs are not clamped."""

    def __init__(self, config: GeneratorConfig = GeneratorConfig()):
        super().__init__()
        self.config = config
        nf, gc = config.base_channels, config.growth_channels
        self.conv_first = nn.Conv2d(3, nf, 3, 1, 1)
        self.body = nn.Sequential(*[RRDB(nf, gc, config.residual_scale, config.negative_slope)
                                    for _ in range(config.num_rrdb_blocks)])
        self.conv_body = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_up1 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_up2 = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_hr = nn.Conv2d(nf, nf, 3, 1, 1)
        self.conv_last = nn.Conv2d(nf, 3, 3, 1, 1)
        self.act = nn.LeakyReLU(config.negative_slope)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        if lr.ndim != 4 or lr.shape[1] != 3:
            raise ShapeError(f"generator expects (B, 3, H, W), got {tuple(lr.shape)}")
        if min(lr.shape[-2:]) < 8:
            raise ShapeError(f"generator input must be at least 8x8, got {tuple(lr.shape[-2:])}")
        feat = self.conv_first(lr)
        feat = feat + self.conv_body(self.body(feat))
        feat = self.act(self.conv_up1(F.interpolate(feat, scale_factor=2, mode="nearest")))
        feat = self.act(self.conv_up2(F.interpolate(feat, scale_factor=2, mode="nearest")))
        return self.conv_last(self.act(self.conv_hr(feat)))


def build_generator(config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> Generator:
    """Construct with a private torch RNG so the global stream is untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config)


def expected_parameter_names(config: GeneratorConfig) -> set[str]:
    names = set()
    for layer in ("conv_first", "conv_body", "conv_up1", "conv_up2", "conv_hr", "conv_last"):
        names |= {f"{layer}.weight", f"{layer}.bias"}
    for b in range(config.num_rrdb_blocks):
        for r in range(1, 4):
            for c in range(1, 6):
                names |= {f"body.{b}.rdb{r}.conv{c}.weight", f"body.{b}.rdb{r}.conv{c}.bias"}
    return names
