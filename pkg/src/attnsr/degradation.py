"""Two-pass ("high-order") synthetic degradation for building LR training inputs.

One pass is the classical chain blur -> resize -> noise -> JPEG; the pipeline
runs it twice with independent parameter ranges and then resizes to exactly
1/4 of the HR size. All randomness flows through :class:`~attnsr.imaging.Rng`.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import config as cfgio
from .imaging import RESIZE_MODES, Rng, check_image, resize

KERNEL_SIZES = tuple(range(7, 22, 2))


@dataclass(frozen=True)
class PassConfig:
    """Parameter ranges for one blur/resize/noise/JPEG pass.

    Ranges are closed ``(low, high)`` pairs. ``blur_prob`` is the chance the
    blur stage runs at all; ``aniso_prob`` picks anisotropic over isotropic
    kernels. Noise sigma is in [0, 1] intensity units.
    """

    kernel_sizes: tuple[int, ...] = KERNEL_SIZES
    blur_prob: float = 1.0
    aniso_prob: float = 0.5
    sigma: tuple[float, float] = (0.2, 3.0)
    rotation: tuple[float, float] = (-math.pi, math.pi)
    resize_scale: tuple[float, float] = (0.5, 1.5)
    resize_modes: tuple[str, ...] = RESIZE_MODES
    noise_prob: float = 1.0
    gaussian_noise_prob: float = 0.5
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    poisson_scale: tuple[float, float] = (0.05, 3.0)
    jpeg_prob: float = 1.0
    jpeg_quality: tuple[int, int] = (30, 95)
    jpeg_subsampling: int = 0

    def __post_init__(self):
        for name in ("sigma", "rotation", "resize_scale", "noise_sigma", "poisson_scale", "jpeg_quality"):
            low, high = getattr(self, name)
            if low > high:
                raise ValueError(f"{name}: empty range ({low}, {high})")
        if not self.kernel_sizes or any(k % 2 == 0 or k < 1 for k in self.kernel_sizes):
            raise ValueError(f"kernel_sizes must be non-empty odd sizes, got {self.kernel_sizes}")
        if not self.resize_modes or any(m not in RESIZE_MODES for m in self.resize_modes):
            raise ValueError(f"resize_modes must be drawn from {RESIZE_MODES}")
        for name in ("blur_prob", "aniso_prob", "noise_prob", "gaussian_noise_prob", "jpeg_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.sigma[0] <= 0:
            raise ValueError("blur sigma must be positive")
        if self.resize_scale[0] <= 0:
            raise ValueError("resize scale must be positive")
        if not (1 <= self.jpeg_quality[0] and self.jpeg_quality[1] <= 100):
            raise ValueError("jpeg_quality must lie in [1, 100]")
        if self.jpeg_subsampling not in (0, 1, 2):
            raise ValueError("jpeg_subsampling must be 0 (4:4:4), 1 (4:2:2) or 2 (4:2:0)")


def _second_pass() -> PassConfig:
    return PassConfig(blur_prob=0.8, sigma=(0.2, 1.5), resize_scale=(0.8, 1.2), noise_sigma=(0.0, 0.05),
                      poisson_scale=(0.05, 2.5))


@dataclass(frozen=True)
class DegradationConfig:
    pass1: PassConfig = field(default_factory=PassConfig)
    pass2: PassConfig = field(default_factory=_second_pass)
    final_resize_modes: tuple[str, ...] = ("area", "bilinear", "bicubic")
    scale: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.scale != 4:
            raise ValueError("final scale factor is fixed at 4")
        if not self.final_resize_modes or any(m not in RESIZE_MODES for m in self.final_resize_modes):
            raise ValueError(f"final_resize_modes must be drawn from {RESIZE_MODES}")

    def passes(self) -> tuple[PassConfig, PassConfig]:
        return (self.pass1, self.pass2)

    @classmethod
    def load(cls, path) -> "DegradationConfig":
        return cfgio.load(cls, path)

    def save(self, path) -> None:
        cfgio.save(self, path)


@dataclass(frozen=True)
class PassParams:
    """Concrete values drawn for one pass. ``None`` marks a skipped stage."""

    kernel: np.ndarray | None
    resize_scale: float
    resize_mode: str
    noise: tuple[str, float] | None
    jpeg_quality: int | None


def gaussian_kernel(size: int, sigma_x: float, sigma_y: float | None = None, theta: float = 0.0) -> np.ndarray:
    """Normalized (an)isotropic Gaussian on a ``size`` x ``size`` grid centred on the middle tap."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    sigma_y = sigma_x if sigma_y is None else sigma_y
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    cov = rot @ np.diag([sigma_x**2, sigma_y**2]) @ rot.T
    inv = np.linalg.inv(cov)
    r = np.arange(size) - size // 2
    xx, yy = np.meshgrid(r, r)
    pts = np.stack([xx, yy], axis=-1)
    k = np.exp(-0.5 * np.einsum("...i,ij,...j->...", pts, inv, pts))
    return k / k.sum()


def generate_blur_kernel(config: DegradationConfig, pass_index: int, rng: Rng) -> np.ndarray:
    if pass_index not in (0, 1):
        raise ValueError("pass_index must be 0 or 1")
    p = config.passes()[pass_index]
    size = rng.choice(p.kernel_sizes)
    if rng.bernoulli(p.aniso_prob):
        sx, sy = rng.uniform(*p.sigma), rng.uniform(*p.sigma)
        theta = rng.uniform(*p.rotation)
        return gaussian_kernel(size, sx, sy, theta)
    return gaussian_kernel(size, rng.uniform(*p.sigma))


def sample_pass_params(config: DegradationConfig, pass_index: int, rng: Rng) -> PassParams:
    p = config.passes()[pass_index]
    kernel = generate_blur_kernel(config, pass_index, rng) if rng.bernoulli(p.blur_prob) else None
    scale = rng.uniform(*p.resize_scale)
    mode = rng.choice(p.resize_modes)
    noise = None
    if rng.bernoulli(p.noise_prob):
        if rng.bernoulli(p.gaussian_noise_prob):
            noise = ("gaussian", rng.uniform(*p.noise_sigma))
        else:
            noise = ("poisson", rng.uniform(*p.poisson_scale))
    quality = rng.integers(*p.jpeg_quality) if rng.bernoulli(p.jpeg_prob) else None
    return PassParams(kernel, scale, mode, noise, quality)


def blur(img: torch.Tensor, kernel: np.ndarray) -> torch.Tensor:
    k = kernel.shape[0]
    h, w = img.shape[-2:]
    if h < k or w < k:
        raise ValueError(f"image {h}x{w} is smaller than the {k}x{k} blur kernel")
    c = img.shape[1]
    weight = torch.from_numpy(np.ascontiguousarray(kernel)).to(img).expand(c, 1, k, k)
    padded = F.pad(img, (k // 2,) * 4, mode="reflect")
    return F.conv2d(padded, weight, groups=c)


def add_gaussian_noise(img: torch.Tensor, sigma: float, rng: Rng) -> torch.Tensor:
    noise = torch.from_numpy(rng.normal(tuple(img.shape), sigma)).to(img)
    return img + noise


def add_poisson_noise(img: torch.Tensor, scale: float, rng: Rng) -> torch.Tensor:
    lam = (img.clamp(0, 1) * 255.0).round().to(torch.float64).cpu().numpy()
    counts = rng.poisson(lam)
    noise = torch.from_numpy((counts - lam) / 255.0).to(img)
    return img + scale * noise


def jpeg(img: torch.Tensor, quality: int, subsampling: int = 0) -> torch.Tensor:
    """Real JPEG encode/decode round-trip of every image in the batch."""
    out = []
    for sample in img:
        arr = sample.detach().clamp(0, 1).mul(255.0).round().to(torch.uint8).permute(1, 2, 0).cpu().numpy()
        pil = Image.fromarray(arr[:, :, 0], "L") if arr.shape[2] == 1 else Image.fromarray(arr, "RGB")
        buf = io.BytesIO()
        pil.save(buf, format="JPEG", quality=int(quality), subsampling=subsampling)
        buf.seek(0)
        dec = np.asarray(Image.open(buf).convert(pil.mode), dtype=np.float32) / 255.0
        if dec.ndim == 2:
            dec = dec[:, :, None]
        out.append(torch.from_numpy(dec).permute(2, 0, 1))
    return torch.stack(out).to(img)


def degrade_with_params(img: torch.Tensor, params: PassParams, rng: Rng, jpeg_subsampling: int = 0) -> torch.Tensor:
    out = img
    if params.kernel is not None:
        out = blur(out, params.kernel).clamp(0, 1)
    out = resize(out, params.resize_scale, params.resize_mode).clamp(0, 1)
    if params.noise is not None:
        kind, value = params.noise
        out = add_gaussian_noise(out, value, rng) if kind == "gaussian" else add_poisson_noise(out, value, rng)
        out = out.clamp(0, 1)
    if params.jpeg_quality is not None:
        out = jpeg(out, params.jpeg_quality, jpeg_subsampling).clamp(0, 1)
    return out


def apply_degradation_pass(img: torch.Tensor, config: DegradationConfig, pass_index: int, rng: Rng) -> torch.Tensor:
    check_image(img)
    params = sample_pass_params(config, pass_index, rng)
    return degrade_with_params(img, params, rng, config.passes()[pass_index].jpeg_subsampling)


def synthesize_lr(hr: torch.Tensor, config: DegradationConfig, rng: Rng) -> torch.Tensor:
    """HR (B, C, H, W) -> LR (B, C, H/4, W/4), quantized to 8-bit levels."""
    check_image(hr, "hr")
    h, w = hr.shape[-2:]
    if h % config.scale or w % config.scale:
        raise ValueError(f"HR size {h}x{w} is not divisible by {config.scale}")
    out = hr
    for index in (0, 1):
        out = apply_degradation_pass(out, config, index, rng)
    mode = rng.choice(config.final_resize_modes)
    out = resize(out, 0.0, mode, size=(h // config.scale, w // config.scale))
    return (out.clamp(0, 1) * 255.0).round() / 255.0
