"""Tiled x4 inference with linear-ramp blending over tile overlaps."""
from __future__ import annotations

import torch

from .generator import Generator
from .imaging import check_image

SCALE = 4


def tile_starts(size: int, tile: int, overlap: int) -> list[int]:
    """Tile origins covering ``[0, size)``; the last tile is flush with the end."""
    if tile >= size:
        return [0]
    step = tile - overlap
    starts = list(range(0, size - tile, step))
    return starts + [size - tile]


def _ramp(length: int, ramp: int, left: bool, right: bool) -> torch.Tensor:
    w = torch.ones(length, dtype=torch.float64)
    if ramp > 0:
        r = (torch.arange(ramp, dtype=torch.float64) + 0.5) / ramp
        if left:
            w[:ramp] = torch.minimum(w[:ramp], r)
        if right:
            w[-ramp:] = torch.minimum(w[-ramp:], r.flip(0))
    return w


@torch.no_grad()
def upscale(generator: Generator, lr: torch.Tensor, tile: int = 256, overlap: int = 16) -> torch.Tensor:
    """Run ``generator`` on ``tile`` x ``tile`` LR windows and blend them into one SR image.

    Overlapping outputs are averaged with weights that ramp linearly across
    the overlap, so tile seams fade instead of cutting. An input no larger
    than one tile is processed in a single pass. Output is clamped to [0, 1].
    """
    check_image(lr, "lr")
    if overlap < 0 or tile <= overlap:
        raise ValueError("need 0 <= overlap < tile")
    generator.eval()
    b, c, h, w = lr.shape
    if h <= tile and w <= tile:
        return generator(lr).clamp(0, 1)
    out = torch.zeros(b, c, h * SCALE, w * SCALE, dtype=torch.float64)
    weight = torch.zeros(1, 1, h * SCALE, w * SCALE, dtype=torch.float64)
    rows, cols = tile_starts(h, tile, overlap), tile_starts(w, tile, overlap)
    for top in rows:
        th = min(tile, h)
        wy = _ramp(th * SCALE, overlap * SCALE, top > 0, top + th < h)
        for left in cols:
            tw = min(tile, w)
            wx = _ramp(tw * SCALE, overlap * SCALE, left > 0, left + tw < w)
            sr = generator(lr[:, :, top:top + th, left:left + tw]).double()
            mask = (wy[:, None] * wx[None, :])[None, None]
            ys, xs = slice(top * SCALE, (top + th) * SCALE), slice(left * SCALE, (left + tw) * SCALE)
            out[:, :, ys, xs] += sr * mask
            weight[:, :, ys, xs] += mask
    return (out / weight).to(lr.dtype).clamp(0, 1)
