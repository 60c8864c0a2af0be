"""Image tensors, file I/O, resampling and seeded randomness.

Every image in the package is a float tensor laid out as (batch, channels,
height, width) with nominal range [0, 1].
"""
from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

RESIZE_MODES = ("nearest", "bilinear", "bicubic", "area")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


class ImageFormatError(ValueError):
    """Raised for files that cannot be decoded as images."""


class Rng:
    """Seeded random stream backed by numpy's PCG64.

    PCG64 output is specified bit-for-bit, so a given seed and call sequence
    gives the same draws on every platform.
    """

    def __init__(self, seed: int, *stream: int):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.stream])))

    def child(self, index: int) -> "Rng":
        """Independent stream keyed by ``index`` (e.g. a sample or iteration number)."""
        return Rng(self.seed, *self.stream, index)

    def uniform(self, low: float, high: float) -> float:
        return float(self._gen.uniform(low, high))

    def integers(self, low: int, high: int) -> int:
        """Uniform integer in the closed interval [low, high]."""
        return int(self._gen.integers(low, high, endpoint=True))

    def choice(self, options):
        options = list(options)
        return options[int(self._gen.integers(0, len(options)))]

    def bernoulli(self, p: float) -> bool:
        return bool(self._gen.random() < p)

    def normal(self, shape, sigma: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, sigma, size=shape)

    def poisson(self, lam: np.ndarray) -> np.ndarray:
        return self._gen.poisson(lam)

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    @state.setter
    def state(self, value: dict) -> None:
        self._gen.bit_generator.state = value


def check_image(img: torch.Tensor, name: str = "image") -> None:
    if not isinstance(img, torch.Tensor) or img.ndim != 4:
        raise ShapeError(f"{name} must be a rank-4 (B, C, H, W) tensor")
    if img.shape[1] not in (1, 3):
        raise ShapeError(f"{name} must have 1 or 3 channels, got {img.shape[1]}")
    if img.shape[2] < 1 or img.shape[3] < 1:
        raise ShapeError(f"{name} has an empty spatial dimension")


def load_image(path: str | os.PathLike) -> torch.Tensor:
    """Read a PNG/JPEG file as a (1, 3, H, W) float32 tensor in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return torch.from_numpy(arr.astype(np.float32) / 255.0).permute(2, 0, 1).unsqueeze(0).contiguous()


def to_uint8(img: torch.Tensor) -> np.ndarray:
    """First image of the batch as an (H, W, C) uint8 array, clamped to [0, 1] first."""
    check_image(img)
    arr = img[0].detach().to(torch.float64).clamp(0, 1).mul(255.0).round().to(torch.uint8)
    return arr.permute(1, 2, 0).cpu().numpy()


def save_image(img: torch.Tensor, path: str | os.PathLike) -> None:
    """Write the first image of the batch as an 8-bit PNG."""
    arr = to_uint8(img)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    if arr.shape[2] == 1:
        Image.fromarray(arr[:, :, 0], mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def list_images(directory: str | os.PathLike) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def _cubic(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    return np.where(
        x <= 1,
        (a + 2) * x**3 - (a + 3) * x**2 + 1,
        np.where(x < 2, a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a, 0.0),
    )


def _triangle(x: np.ndarray) -> np.ndarray:
    return np.clip(1.0 - np.abs(x), 0.0, None)


def resize_matrix(in_size: int, out_size: int, mode: str, antialias: bool = False) -> np.ndarray:
    """Dense (out_size, in_size) interpolation matrix with rows summing to 1.

    Pixel centres are aligned (half-pixel convention); taps falling outside
    the input are clamped onto the border pixel.
    """
    scale = out_size / in_size
    w = np.zeros((out_size, in_size))
    if mode == "nearest":
        src = np.minimum(np.floor((np.arange(out_size) + 0.5) / scale).astype(int), in_size - 1)
        w[np.arange(out_size), src] = 1.0
        return w
    if mode == "area":
        # exact overlap of the output cell [i/s, (i+1)/s) with each input pixel
        lo = np.arange(out_size) / scale
        hi = (np.arange(out_size) + 1) / scale
        j = np.arange(in_size)
        overlap = np.clip(np.minimum(hi[:, None], j[None, :] + 1) - np.maximum(lo[:, None], j[None, :]), 0, None)
        return overlap / overlap.sum(axis=1, keepdims=True)
    if mode == "bilinear":
        kernel, support = _triangle, 1.0
    elif mode == "bicubic":
        kernel, support = _cubic, 2.0
    else:
        raise ValueError(f"unknown resize mode {mode!r}; expected one of {RESIZE_MODES}")
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    centers = (np.arange(out_size) + 0.5) / scale - 0.5
    radius = support * stretch
    for i, c in enumerate(centers):
        taps = np.arange(math.floor(c - radius), math.ceil(c + radius) + 1)
        weights = kernel((c - taps) / stretch)
        np.add.at(w[i], np.clip(taps, 0, in_size - 1), weights)
    return w / w.sum(axis=1, keepdims=True)


def resize(img: torch.Tensor, scale: float, mode: str = "bicubic", antialias: bool = False,
           size: tuple[int, int] | None = None) -> torch.Tensor:
    """Resample spatially by ``scale`` (or to an explicit ``size``).

    Separable and differentiable; bicubic uses the a = -0.5 kernel.
    """
    check_image(img)
    h, w = img.shape[-2:]
    if size is None:
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        size = (round(h * scale), round(w * scale))
    oh, ow = size
    if oh < 1 or ow < 1:
        raise ValueError(f"resize of {h}x{w} by {scale} gives empty output {oh}x{ow}")
    if (oh, ow) == (h, w) and mode == "nearest":
        return img.clone()
    wh = torch.from_numpy(resize_matrix(h, oh, mode, antialias)).to(img)
    ww = torch.from_numpy(resize_matrix(w, ow, mode, antialias)).to(img)
    return torch.einsum("oh,bchw,pw->bcop", wh, img, ww)


def extract_patch(img: torch.Tensor, size: int, rng: Rng) -> torch.Tensor:
    """Random ``size`` x ``size`` window; offsets uniform over every valid position."""
    check_image(img)
    h, w = img.shape[-2:]
    if size < 1 or size > h or size > w:
        raise ValueError(f"patch size {size} does not fit a {h}x{w} image")
    top = rng.integers(0, h - size)
    left = rng.integers(0, w - size)
    return img[:, :, top:top + size, left:left + size].clone()


def to_gray(img: torch.Tensor) -> torch.Tensor:
    """ITU-R 601 luminance, shape (B, 1, H, W)."""
    check_image(img)
    if img.shape[1] == 1:
        return img
    weights = torch.tensor([0.299, 0.587, 0.114], dtype=img.dtype, device=img.device).view(1, 3, 1, 1)
    return (img * weights).sum(dim=1, keepdim=True)
