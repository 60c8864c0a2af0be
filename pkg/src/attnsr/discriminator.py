"""Attention U-Net per-pixel discriminator and its two-scale wrapper.

The encoder halves resolution ``num_levels`` times (channels F, 2F, 4F, 8F for
three levels). Each decoder step upsamples the coarser features and joins them
with the matching encoder features after an additive attention gate that is
driven by the coarser decoder features. The head maps to one logit per input
pixel. Convolutions use reflect padding, so a constant image yields constant
feature maps at every level.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ShapeError, resize

SN_EPS = 1e-12


def _l2_normalize(v: torch.Tensor, eps: float = SN_EPS) -> torch.Tensor:
    return v / v.norm().clamp_min(eps)


def spectral_normalize(weight: torch.Tensor, u: torch.Tensor, iterations: int = 1,
                       eps: float = SN_EPS) -> tuple[torch.Tensor, torch.Tensor]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    ``weight`` may be any shape; it is viewed as (rows, -1) with rows the first
    dimension. Returns the normalized weight (same shape) and the updated left
    singular vector estimate. A matrix whose estimate falls below ``eps`` is
    returned unchanged.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u = _l2_normalize(u.to(mat), eps)
        for _ in range(iterations):
            v = _l2_normalize(mat.t() @ u, eps)
            u = _l2_normalize(mat @ v, eps)
        v = _l2_normalize(mat.t() @ u, eps)
    sigma = torch.dot(u, mat @ v)
    sigma = torch.where(sigma > eps, sigma, torch.ones_like(sigma))
    return weight / sigma, u


class SNConv2d(nn.Conv2d):
    """Conv2d whose kernel is spectrally normalized on every forward.

    The left singular vector ``u`` persists as a buffer and advances by
    ``power_iterations`` steps per forward in training mode only; evaluation
    reuses the stored vector so repeated inference is bit-identical.
    """

    def __init__(self, *args, spectral_norm: bool = True, power_iterations: int = 1, **kwargs):
        super().__init__(*args, **kwargs)
        self.spectral_norm = spectral_norm
        self.power_iterations = power_iterations
        u = torch.randn(self.out_channels)
        self.register_buffer("sn_u", _l2_normalize(u))

    def normalized_weight(self) -> torch.Tensor:
        if not self.spectral_norm:
            return self.weight
        if self.training:
            w, u = spectral_normalize(self.weight, self.sn_u, self.power_iterations)
            self.sn_u.copy_(u)
            return w
        mat = self.weight.reshape(self.out_channels, -1)
        with torch.no_grad():
            u = self.sn_u.to(mat)
            v = _l2_normalize(mat.t() @ u)
        sigma = torch.dot(u, mat @ v)
        sigma = torch.where(sigma > SN_EPS, sigma, torch.ones_like(sigma))
        return self.weight / sigma

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self._conv_forward(x, self.normalized_weight(), self.bias)


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    ``alpha = sigmoid(psi(relu(W_x(pool2(x_l)) + W_g(g))))`` is computed on the
    gating grid (half of ``x_l``'s size), upsampled bilinearly, and multiplies
    ``x_l``.

    Args:
        skip_channels: channels of ``x_l``.
        gate_channels: channels of the gating signal ``g``.
        inter_channels: width of the 1x1 projections.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: int):
        super().__init__()
        if inter_channels < 1:
            raise ValueError("inter_channels must be >= 1")
        self.skip_channels = skip_channels
        self.gate_channels = gate_channels
        self.inter_channels = inter_channels
        self.W_x = nn.Conv2d(skip_channels, inter_channels, 1, bias=False)
        self.W_g = nn.Conv2d(gate_channels, inter_channels, 1, bias=True)
        self.psi = nn.Conv2d(inter_channels, 1, 1, bias=True)

    def forward(self, x_l: torch.Tensor, g: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if x_l.ndim != 4 or g.ndim != 4 or x_l.shape[0] != g.shape[0]:
            raise ShapeError("attention gate expects matching (B, C, H, W) tensors")
        if x_l.shape[1] != self.skip_channels or g.shape[1] != self.gate_channels:
            raise ShapeError(f"channel mismatch: x_l {x_l.shape[1]} (want {self.skip_channels}), "
                             f"g {g.shape[1]} (want {self.gate_channels})")
        h, w = x_l.shape[-2:]
        if h % 2 or w % 2 or tuple(g.shape[-2:]) != (h // 2, w // 2):
            raise ShapeError(f"gating grid {tuple(g.shape[-2:])} must be half of {(h, w)}")
        q = F.relu(self.W_x(F.avg_pool2d(x_l, 2)) + self.W_g(g))
        alpha = torch.sigmoid(self.psi(q))
        alpha = F.interpolate(alpha, size=(h, w), mode="bilinear", align_corners=False)
        # keep strictly inside (0, 1) where the sigmoid saturates in floating point
        eps = torch.finfo(alpha.dtype).eps
        alpha = alpha.clamp(eps, 1 - eps)
        return alpha * x_l, alpha


@dataclass(frozen=True)
class UNetDiscriminatorConfig:
    first_conv_channels: int = 16
    num_levels: int = 3
    spectral_norm: bool = True
    power_iterations: int = 1
    negative_slope: float = 0.2
    in_channels: int = 3

    def __post_init__(self):
        if self.first_conv_channels < 1 or self.num_levels < 1 or self.power_iterations < 1:
            raise ValueError("first_conv_channels, num_levels and power_iterations must be >= 1")

    @classmethod
    def full_scale(cls) -> "UNetDiscriminatorConfig":
        return cls(first_conv_channels=64)


@dataclass
class DiscriminatorOutput:
    logits: torch.Tensor
    attention_maps: list[torch.Tensor] = field(default_factory=list)


class UNetDiscriminator(nn.Module):
    def __init__(self, config: UNetDiscriminatorConfig = UNetDiscriminatorConfig()):
        super().__init__()
        self.config = config
        nf, L = config.first_conv_channels, config.num_levels
        sn = dict(spectral_norm=config.spectral_norm, power_iterations=config.power_iterations,
                  padding_mode="reflect")
        widths = [nf * 2**i for i in range(L + 1)]
        self.conv0 = nn.Conv2d(config.in_channels, nf, 3, 1, 1, padding_mode="reflect")
        self.down = nn.ModuleList(SNConv2d(widths[i], widths[i + 1], 4, 2, 1, bias=False, **sn) for i in range(L))
        # decoder step k joins level L-1-k (coarse to fine)
        self.gates = nn.ModuleList()
        self.up = nn.ModuleList()
        for k in range(L):
            level = L - 1 - k
            skip, gate = widths[level], widths[level + 1]
            self.gates.append(AttentionGate(skip, gate, max(skip // 2, 1)))
            self.up.append(SNConv2d(gate + skip, skip, 3, 1, 1, bias=False, **sn))
        self.head1 = SNConv2d(nf, nf, 3, 1, 1, bias=False, **sn)
        self.head2 = SNConv2d(nf, nf, 3, 1, 1, bias=False, **sn)
        self.out = nn.Conv2d(nf, 1, 1)
        self.act = nn.LeakyReLU(config.negative_slope)

    def sn_layers(self) -> list[SNConv2d]:
        return [m for m in self.modules() if isinstance(m, SNConv2d)]

    def forward(self, img: torch.Tensor) -> DiscriminatorOutput:
        L = self.config.num_levels
        if img.ndim != 4 or img.shape[1] != self.config.in_channels:
            raise ShapeError(f"discriminator expects (B, {self.config.in_channels}, H, W), got {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % 2**L or w % 2**L:
            raise ShapeError(f"input {h}x{w} is not divisible by 2^{L}")
        feats = [self.act(self.conv0(img))]
        for conv in self.down:
            feats.append(self.act(conv(feats[-1])))
        d = feats[-1]
        maps = []
        for k in range(L):
            skip = feats[L - 1 - k]
            gated, alpha = self.gates[k](skip, d)
            maps.append(alpha)
            d = F.interpolate(d, scale_factor=2, mode="bilinear", align_corners=False)
            d = self.act(self.up[k](torch.cat([d, gated], 1)))
        d = self.act(self.head1(d))
        d = self.act(self.head2(d))
        return DiscriminatorOutput(self.out(d), maps)


def downsample_half(img: torch.Tensor) -> torch.Tensor:
    """Bilinear 2x downsampling used for the second discriminator's input."""
    return resize(img, 0.5, "bilinear")


class MultiScaleDiscriminator(nn.Module):
    """Two independently parameterized U-Nets at full and half resolution.

    With ``num_scales=1`` only the full-resolution network exists.
    """

    def __init__(self, config: UNetDiscriminatorConfig = UNetDiscriminatorConfig(), num_scales: int = 2):
        super().__init__()
        if num_scales not in (1, 2):
            raise ValueError("num_scales must be 1 or 2")
        self.config = config
        self.num_scales = num_scales
        self.d1 = UNetDiscriminator(config)
        self.d2 = UNetDiscriminator(config) if num_scales == 2 else None

    def forward(self, img: torch.Tensor) -> tuple[DiscriminatorOutput, ...]:
        L = self.config.num_levels
        h, w = img.shape[-2:]
        div = 2 ** (L + self.num_scales - 1)
        if h % div or w % div:
            raise ShapeError(f"input {h}x{w} is not divisible by {div}")
        full = self.d1(img)
        if self.d2 is None:
            return (full,)
        return full, self.d2(downsample_half(img))


def build_discriminator(config: UNetDiscriminatorConfig = UNetDiscriminatorConfig(), num_scales: int = 2,
                        seed: int = 0) -> MultiScaleDiscriminator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MultiScaleDiscriminator(config, num_scales)
