"""Raster helpers: resizing, PNG I/O and 8-bit quantisation."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "bilinear_resize",
    "resize_tile",
    "tile_to_input",
    "read_rgb",
    "read_gray",
    "write_rgb",
    "write_gray",
    "quantize_unit",
]


def bilinear_resize(raster: np.ndarray, out_size: tuple[int, int]) -> np.ndarray:
    """Bilinear resampling of a 2-D float raster with half-pixel-centred sampling.

    Sample positions outside the source grid are clamped to the border.
    """
    src = np.asarray(raster, dtype=np.float64)
    h, w = src.shape
    oh, ow = out_size
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_tile(rgb: np.ndarray, size: int) -> np.ndarray:
    """Downsample an 8-bit RGB tile with Pillow's (area-aware) bilinear filter."""
    if rgb.shape[0] == size and rgb.shape[1] == size:
        return rgb
    return np.asarray(Image.fromarray(rgb).resize((size, size), Image.BILINEAR))


def tile_to_input(rgb: np.ndarray, size: int) -> np.ndarray:
    """8-bit RGB tile -> ``size x size x 3`` float64 network input in ``[0, 1]``."""
    return resize_tile(np.asarray(rgb, dtype=np.uint8), size).astype(np.float64) / 255.0


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_gray(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"))


def write_rgb(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), "RGB").save(path, optimize=False)


def write_gray(path: str | Path, gray: np.ndarray) -> None:
    Image.fromarray(np.asarray(gray, dtype=np.uint8), "L").save(path, optimize=False)


def quantize_unit(values: np.ndarray) -> np.ndarray:
    """Map ``[0, 1]`` floats to 0..255 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)
