"""Relativistic per-pixel adversarial losses, perceptual/L1 terms and their weighting.

Logit maps are (B, 1, H, W) tensors from a U-Net discriminator. The
two-argument probability ``D(a, b)`` is ``sigmoid(C_a - mean(C_b))`` with the
mean over every batch element and pixel of ``C_b``. Adversarial losses are
reported as per-pixel means so the half-resolution discriminator's loss is on
the same scale as the full-resolution one.
"""
from __future__ import annotations

import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .imaging import ShapeError


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    eta: float = 1.0
    perceptual_weight: float = 1.0
    adversarial_weight: float = 0.1

    def __post_init__(self):
        values = (self.lambda1, self.lambda2, self.eta, self.perceptual_weight, self.adversarial_weight)
        if any(v < 0 for v in values):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in values):
            raise ValueError("at least one loss weight must be positive")


def _same_shape(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def relativistic_map(c_a: torch.Tensor, c_b: torch.Tensor) -> torch.Tensor:
    _same_shape(c_a, c_b)
    return torch.sigmoid(c_a - c_b.mean())


def discriminator_loss(c_r: torch.Tensor, c_f: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-log D(r, f) - log(1 - D(f, r))``.

    Written with softplus, since -log(sigmoid(z)) = softplus(-z) and
    -log(1 - sigmoid(z)) = softplus(z).
    """
    _same_shape(c_r, c_f)
    real_term = F.softplus(-(c_r - c_f.mean()))
    fake_term = F.softplus(c_f - c_r.mean())
    return (real_term + fake_term).mean()


def generator_adversarial_loss(c_r: torch.Tensor, c_f: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``-log(1 - D(r, f)) - log D(f, r)``."""
    _same_shape(c_r, c_f)
    fake_term = F.softplus(-(c_f - c_r.mean()))
    real_term = F.softplus(c_r - c_f.mean())
    return (fake_term + real_term).mean()


def total_discriminator_loss(normal, sampled, weights: LossWeights):
    """``lambda1 * normal + lambda2 * sampled``; ``sampled=None`` means single-scale."""
    if sampled is None:
        return weights.lambda1 * normal
    return weights.lambda1 * normal + weights.lambda2 * sampled


def l1_loss(sr: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    _same_shape(sr, hr)
    return (sr - hr).abs().mean()


def generator_total_loss(perceptual, adv_normal, adv_sampled, l1, weights: LossWeights):
    adversarial = total_discriminator_loss(adv_normal, adv_sampled, weights)
    return (weights.perceptual_weight * perceptual
            + weights.adversarial_weight * adversarial
            + weights.eta * l1)


IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class FeatureExtractor(nn.Module):
    """Frozen conv pyramid whose intermediate activations drive the perceptual loss.

    Args:
        layers: modules applied in order.
        taps: number of leading modules applied before each tapped feature;
            0 taps the (normalized) input itself.
        layer_weights: one weight per tap.
        normalize_input: subtract/divide by ImageNet statistics first.
    """

    def __init__(self, layers: nn.Sequential, taps: tuple[int, ...], layer_weights: tuple[float, ...],
                 normalize_input: bool = True):
        super().__init__()
        if len(taps) != len(layer_weights) or not taps:
            raise ValueError("need one weight per tap and at least one tap")
        if list(taps) != sorted(taps) or taps[-1] > len(layers):
            raise ValueError("taps must be increasing and within the layer stack")
        self.layers = layers
        self.taps = tuple(taps)
        self.layer_weights = tuple(layer_weights)
        self.normalize_input = normalize_input
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    @classmethod
    def random_pyramid(cls, seed: int = 0, widths: tuple[int, ...] = (16, 32, 64)) -> "FeatureExtractor":
        """VGG-shaped stack (two 3x3 convs + ReLU per stage, max-pool between) with seeded weights."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            modules, taps, c_in = [], [], 3
            for i, width in enumerate(widths):
                if i:
                    modules.append(nn.MaxPool2d(2))
                for _ in range(2):
                    conv = nn.Conv2d(c_in, width, 3, 1, 1)
                    nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                    nn.init.zeros_(conv.bias)
                    modules += [conv, nn.ReLU()]
                    c_in = width
                taps.append(len(modules))
        return cls(nn.Sequential(*modules), tuple(taps), (1.0,) * len(taps))

    @classmethod
    def identity(cls) -> "FeatureExtractor":
        return cls(nn.Sequential(), (0,), (1.0,), normalize_input=False)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FeatureExtractor":
        """Load a stack saved by :meth:`save` (e.g. converted pretrained weights)."""
        blob = torch.load(path, map_location="cpu", weights_only=False)
        ext = cls(blob["layers"], tuple(blob["taps"]), tuple(blob["layer_weights"]), blob["normalize_input"])
        return ext

    def save(self, path: str | os.PathLike) -> None:
        torch.save({"layers": self.layers, "taps": self.taps, "layer_weights": self.layer_weights,
                    "normalize_input": self.normalize_input}, path)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if self.normalize_input:
            x = (x - self.mean.to(x)) / self.std.to(x)
        feats, applied = [], 0
        for tap in self.taps:
            while applied < tap:
                x = self.layers[applied](x)
                applied += 1
            feats.append(x)
        return feats


def perceptual_loss(sr: torch.Tensor, hr: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    _same_shape(sr, hr)
    total = sr.new_zeros(())
    for w, fs, fh in zip(extractor.layer_weights, extractor(sr), extractor(hr)):
        total = total + w * (fs - fh).abs().mean()
    return total
