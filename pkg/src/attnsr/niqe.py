"""NIQE: distance between natural-scene-statistics fits of a test image and a pristine corpus.

Pipeline per scale: luminance (0..255) -> MSCN field -> non-overlapping
``patch_size`` patches -> 18 AGGD-derived features per patch (MSCN shape and
spread, plus shape/mean/left/right spread for 4 neighbour-product fields). The
half scale repeats this on a 2x bicubic-downsampled image with half-size
patches, so both scales yield the same patch grid and each patch a 36-vector.

Lower scores mean statistics closer to the pristine model. Scores depend on the
pristine corpus; the bundled model is fitted on this repo's own mini corpus.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import correlate
from scipy.special import gamma as gamma_fn

from .imaging import check_image, list_images, load_image, resize, to_gray

WINDOW_SIZE = 7
WINDOW_SIGMA = 7.0 / 6.0
MSCN_C = 1.0
NUM_FEATURES = 36
MIN_AGGD_SAMPLES = 100
MIN_PRISTINE_IMAGES = 10
DEFAULT_RIDGE = 1e-3
MODEL_VERSION = 1
SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))

_GAMMA_GRID = np.arange(200, 10001) / 1000.0
_RHO_GRID = gamma_fn(2 / _GAMMA_GRID) ** 2 / (gamma_fn(1 / _GAMMA_GRID) * gamma_fn(3 / _GAMMA_GRID))


class AggdFitError(ValueError):
    """Samples too few or degenerate for an AGGD fit."""


def gaussian_window(size: int = WINDOW_SIZE, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-0.5 * (r / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def _local_moments(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if gray.ndim != 2 or min(gray.shape) < 2 * WINDOW_SIZE:
        raise ValueError(f"need a 2-D image of at least {2 * WINDOW_SIZE}x{2 * WINDOW_SIZE}, got {gray.shape}")
    # centring first reduces cancellation in E[I^2] - mu^2 and keeps flat images exactly zero
    gray = gray.astype(np.float64) - np.median(gray)
    w = gaussian_window()
    mu = correlate(gray, w, mode="nearest")
    var = correlate(gray * gray, w, mode="nearest") - mu * mu
    return mu, np.sqrt(np.abs(var))


def compute_mscn(gray: np.ndarray) -> np.ndarray:
    """``(I - mu) / (sigma + 1)`` with 7x7 Gaussian-weighted local mean and deviation."""
    mu, sigma = _local_moments(gray)
    return (gray - np.median(gray) - mu) / (sigma + MSCN_C)


def fit_aggd(samples: np.ndarray) -> tuple[float, float, float]:
    """Moment-matching AGGD fit.

    Returns ``(alpha, sigma_left, sigma_right)`` where the sigmas are the
    root-mean-square of the negative and positive samples. The shape is the grid
    point in [0.2, 10] (step 0.001) whose moment ratio best matches the data.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < MIN_AGGD_SAMPLES:
        raise AggdFitError(f"need at least {MIN_AGGD_SAMPLES} samples, got {x.size}")
    neg, pos = x[x < 0], x[x > 0]
    if neg.size == 0 or pos.size == 0:
        raise AggdFitError("samples must contain both negative and positive values")
    left = np.sqrt(np.mean(neg * neg))
    right = np.sqrt(np.mean(pos * pos))
    rhat = np.mean(np.abs(x)) ** 2 / np.mean(x * x)
    # symmetric in (left, right), so negating the samples swaps the sigmas exactly
    rhat_norm = rhat * (left**3 + right**3) * (left + right) / (left**2 + right**2) ** 2
    alpha = float(_GAMMA_GRID[np.argmin((_RHO_GRID - rhat_norm) ** 2)])
    return alpha, float(left), float(right)


def neighbour_products(block: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """``block[i, j] * block[i + dy, j + dx]`` over positions where both lie inside the block."""
    h, w = block.shape
    a_cols = slice(0, w - dx) if dx >= 0 else slice(-dx, w)
    b_cols = slice(dx, w) if dx >= 0 else slice(0, w + dx)
    return block[0:h - dy, a_cols] * block[dy:h, b_cols]


def _scale_param(sigma: float, alpha: float) -> float:
    return sigma * np.sqrt(gamma_fn(1 / alpha) / gamma_fn(3 / alpha))


def _aggd_features(block: np.ndarray) -> list[float]:
    alpha, left, right = fit_aggd(block)
    feats = [alpha, (_scale_param(left, alpha) + _scale_param(right, alpha)) / 2]
    for dy, dx in SHIFTS:
        alpha, left, right = fit_aggd(neighbour_products(block, dy, dx))
        beta_l, beta_r = _scale_param(left, alpha), _scale_param(right, alpha)
        mean = (beta_r - beta_l) * gamma_fn(2 / alpha) / gamma_fn(1 / alpha)
        feats += [alpha, mean, beta_l, beta_r]
    return feats


def _safe_features(block: np.ndarray) -> list[float]:
    # flat patches have no AGGD fit; they become NaN rows and are dropped later
    try:
        return _aggd_features(block)
    except AggdFitError:
        return [np.nan] * (NUM_FEATURES // 2)


def _patch_grid(shape: tuple[int, int], patch: int) -> list[tuple[int, int]]:
    return [(r, c) for r in range(0, shape[0] - patch + 1, patch) for c in range(0, shape[1] - patch + 1, patch)]


def patch_features(gray: np.ndarray, patch_size: int = 96) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch 36-vectors and sharpness for every full patch of ``gray`` (0..255 luminance).

    Returns:
        ``(features, sharpness)`` of shapes (N, 36) and (N,). Sharpness is the
        mean local deviation over the full-scale patch. Rows of patches too
        flat to fit are NaN.
    """
    if patch_size % 2 or patch_size < 2 * WINDOW_SIZE:
        raise ValueError("patch_size must be even and at least twice the window size")
    h, w = gray.shape
    if h < patch_size or w < patch_size:
        raise ValueError(f"image {h}x{w} is smaller than one {patch_size}x{patch_size} patch")
    rows, cols = h // patch_size * patch_size, w // patch_size * patch_size
    full = np.asarray(gray, dtype=np.float64)[:rows, :cols]
    half = resize(torch.from_numpy(full)[None, None], 0.5, "bicubic", antialias=True)[0, 0].numpy()
    scales = []
    sharpness = None
    for img, p in ((full, patch_size), (half, patch_size // 2)):
        mscn = compute_mscn(img)
        grid = _patch_grid(img.shape, p)
        scales.append(np.array([_safe_features(mscn[r:r + p, c:c + p]) for r, c in grid]))
        if sharpness is None:
            _, sigma = _local_moments(img)
            sharpness = np.array([sigma[r:r + p, c:c + p].mean() for r, c in grid])
    return np.hstack(scales), sharpness


def _valid_rows(feats: np.ndarray) -> np.ndarray:
    valid = np.isfinite(feats).all(axis=1)
    if not valid.any():
        raise ValueError("image has no textured patch; NIQE is undefined for flat images")
    return valid


@dataclass(frozen=True)
class Features:
    vector: np.ndarray
    num_patches: int
    used_fallback: bool


def extract_features(gray: np.ndarray, patch_size: int = 96, sharpness_fraction: float = 0.75) -> Features:
    """Mean 36-vector over patches whose sharpness is at least ``sharpness_fraction`` of the sharpest.

    If no patch qualifies (a flat image) every patch is used and
    ``used_fallback`` is set.
    """
    if not 0.0 < sharpness_fraction <= 1.0:
        raise ValueError("sharpness_fraction must lie in (0, 1]")
    feats, sharp = patch_features(gray, patch_size)
    valid = _valid_rows(feats)
    keep = valid & (sharp > 0) & (sharp >= sharpness_fraction * sharp.max())
    fallback = not keep.any()
    if fallback:
        keep = valid
    return Features(feats[keep].mean(axis=0), int(keep.sum()), bool(fallback))


def image_luminance(img: torch.Tensor) -> list[np.ndarray]:
    """(B, C, H, W) in [0, 1] -> list of 2-D luminance arrays on the 0..255 scale."""
    check_image(img)
    gray = to_gray(img) if img.shape[1] == 3 else img
    return [g[0].double().numpy() * 255.0 for g in gray]


@dataclass(frozen=True)
class NiqeModel:
    mu: np.ndarray
    sigma: np.ndarray
    patch_size: int = 96
    sharpness_fraction: float = 0.75

    def __post_init__(self):
        if self.mu.shape != (NUM_FEATURES,) or self.sigma.shape != (NUM_FEATURES, NUM_FEATURES):
            raise ValueError("NIQE model needs a 36-vector mean and a 36x36 covariance")
        if not np.allclose(self.sigma, self.sigma.T, atol=1e-12):
            raise ValueError("NIQE covariance must be symmetric")

    def save(self, path: str | os.PathLike) -> None:
        lines = [f"{MODEL_VERSION} {self.patch_size} {self.sharpness_fraction!r}",
                 " ".join(repr(float(v)) for v in self.mu)]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.sigma]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "NiqeModel":
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        version, patch, fraction = lines[0].split()
        if int(version) != MODEL_VERSION:
            raise ValueError(f"{path}: unsupported NIQE model version {version}")
        if len(lines) != 2 + NUM_FEATURES:
            raise ValueError(f"{path}: expected {2 + NUM_FEATURES} lines, got {len(lines)}")
        mu = np.array([float(v) for v in lines[1].split()])
        sigma = np.array([[float(v) for v in ln.split()] for ln in lines[2:]])
        return cls(mu, sigma, int(patch), float(fraction))


def default_model_path() -> Path:
    return Path(str(resources.files("attnsr") / "data" / "pristine_niqe.txt"))


def load_default_model() -> NiqeModel:
    return NiqeModel.load(default_model_path())


def fit_pristine_model(source, patch_size: int = 96, sharpness_fraction: float = 0.75,
                       ridge: float = DEFAULT_RIDGE) -> NiqeModel:
    """Mean and ridge-regularized covariance of per-image features over a pristine corpus.

    Args:
        source: directory of images, or a list of paths / (1, C, H, W) tensors.
        ridge: ``eps`` added to the covariance diagonal.
    """
    if isinstance(source, (str, os.PathLike)):
        items = list_images(source)
    else:
        items = list(source)
    if len(items) < MIN_PRISTINE_IMAGES:
        raise ValueError(f"need at least {MIN_PRISTINE_IMAGES} pristine images, got {len(items)}")
    vectors = []
    for item in items:
        img = item if isinstance(item, torch.Tensor) else load_image(item)
        for gray in image_luminance(img):
            vectors.append(extract_features(gray, patch_size, sharpness_fraction).vector)
    feats = np.array(vectors)
    # shifted two-pass mean: exact when all rows agree
    mu = feats[0] + (feats - feats[0]).mean(axis=0)
    centered = feats - mu
    cov = centered.T @ centered / (len(feats) - 1)
    cov = (cov + cov.T) / 2 + ridge * np.eye(NUM_FEATURES)
    return NiqeModel(mu, cov, patch_size, sharpness_fraction)


def niqe_distance(mu1: np.ndarray, sigma1: np.ndarray, mu2: np.ndarray, sigma2: np.ndarray) -> float:
    """``sqrt(d^T pinv((sigma1 + sigma2) / 2) d)`` with ``d = mu1 - mu2``."""
    d = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    pooled = np.linalg.pinv((sigma1 + sigma2) / 2)
    return float(np.sqrt(max(d @ pooled @ d, 0.0)))


def niqe_gray(gray: np.ndarray, model: NiqeModel) -> float:
    feats, _ = patch_features(gray, model.patch_size)
    feats = feats[_valid_rows(feats)]
    mu = feats.mean(axis=0)
    cov = np.cov(feats, rowvar=False) if len(feats) > 1 else np.zeros((NUM_FEATURES, NUM_FEATURES))
    return niqe_distance(model.mu, model.sigma, mu, cov)


def niqe_scores(img: torch.Tensor, model: NiqeModel | None = None) -> list[float]:
    """One NIQE score per batch element; lower is better."""
    model = model if model is not None else load_default_model()
    return [niqe_gray(g, model) for g in image_luminance(img)]


def niqe_score(img: torch.Tensor, model: NiqeModel | None = None) -> float:
    """Mean NIQE over the batch."""
    scores = niqe_scores(img, model)
    return scores[0] if len(set(scores)) == 1 else float(np.mean(scores))
