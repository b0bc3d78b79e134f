"""Slide-level heatmaps from per-tile values (ROI probabilities, attention, CAMs)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError
from .imaging import quantize_unit, write_gray

__all__ = [
    "HeatmapRaster",
    "CenterGridInterpolator",
    "probability_heatmap",
    "normalize_attention",
    "attention_heatmap",
    "write_heatmap_png",
    "write_heatmap_csv",
    "read_heatmap_csv",
]

PROVENANCES = ("roi_probability", "attention", "cam")


@dataclass
class HeatmapRaster:
    values: np.ndarray
    provenance: str
    coverage: np.ndarray | None = None

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")


class CenterGridInterpolator:
    """Bilinear interpolation over tile centres lying on a rectilinear grid.

    Grid nodes with no tile (filtered out) borrow the value of the nearest
    present node.  Query points outside the grid's bounding box take the
    nearest node's value.
    """

    def __init__(self, centers: np.ndarray, values: np.ndarray):
        centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(centers) == 0:
            raise ContractError("no tiles to interpolate")
        if len(centers) != len(values):
            raise ContractError("centers and values differ in length")
        self.xs = np.unique(centers[:, 0])
        self.ys = np.unique(centers[:, 1])
        grid = np.full((len(self.ys), len(self.xs)), np.nan)
        ix = np.searchsorted(self.xs, centers[:, 0])
        iy = np.searchsorted(self.ys, centers[:, 1])
        grid[iy, ix] = values
        missing = np.argwhere(np.isnan(grid))
        if len(missing):
            present = np.argwhere(~np.isnan(grid))
            pc = np.stack([self.ys[present[:, 0]], self.xs[present[:, 1]]], axis=1)
            for r, c in missing:
                d = (pc[:, 0] - self.ys[r]) ** 2 + (pc[:, 1] - self.xs[c]) ** 2
                k = int(np.argmin(d))
                grid[r, c] = grid[present[k, 0], present[k, 1]]
        self.grid = grid

    @staticmethod
    def _bracket(axis: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if len(axis) == 1:
            z = np.zeros(q.shape, dtype=int)
            return z, z, np.zeros(q.shape)
        qc = np.clip(q, axis[0], axis[-1])
        i1 = np.clip(np.searchsorted(axis, qc, side="right"), 1, len(axis) - 1)
        i0 = i1 - 1
        t = (qc - axis[i0]) / (axis[i1] - axis[i0])
        return i0, i1, t

    @staticmethod
    def _nearest(axis: np.ndarray, q: np.ndarray) -> np.ndarray:
        i1 = np.clip(np.searchsorted(axis, q), 0, len(axis) - 1)
        i0 = np.clip(i1 - 1, 0, len(axis) - 1)
        return np.where(np.abs(q - axis[i0]) <= np.abs(axis[i1] - q), i0, i1)

    def __call__(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        x, y = np.broadcast_arrays(x, y)
        x0, x1, tx = self._bracket(self.xs, x)
        y0, y1, ty = self._bracket(self.ys, y)
        g = self.grid
        val = (
            g[y0, x0] * (1 - tx) * (1 - ty)
            + g[y0, x1] * tx * (1 - ty)
            + g[y1, x0] * (1 - tx) * ty
            + g[y1, x1] * tx * ty
        )
        outside = (x < self.xs[0]) | (x > self.xs[-1]) | (y < self.ys[0]) | (y > self.ys[-1])
        if np.any(outside):
            nx = self._nearest(self.xs, x[outside])
            ny = self._nearest(self.ys, y[outside])
            val = np.array(val, copy=True)
            val[outside] = g[ny, nx]
        return val


def _pixel_centres(output_dims: tuple[int, int], slide_dims: tuple[int, int] | None):
    oh, ow = output_dims
    sh, sw = slide_dims if slide_dims is not None else output_dims
    ys = (np.arange(oh) + 0.5) * (sh / oh)
    xs = (np.arange(ow) + 0.5) * (sw / ow)
    return np.meshgrid(xs, ys)


def probability_heatmap(
    tile_probs: Sequence[tuple[float, float, float]],
    output_dims: tuple[int, int],
    slide_dims: tuple[int, int] | None = None,
    provenance: str = "roi_probability",
) -> HeatmapRaster:
    """Raster of per-tile values interpolated at every output pixel centre.

    ``tile_probs`` holds ``(x_center, y_center, value)`` in slide
    coordinates; ``slide_dims`` (height, width) maps the output raster onto
    the slide, defaulting to a 1:1 mapping.
    """
    arr = np.asarray(tile_probs, dtype=np.float64).reshape(-1, 3)
    if len(arr) == 0:
        raise ContractError("heatmap needs at least one tile")
    interp = CenterGridInterpolator(arr[:, :2], arr[:, 2])
    gx, gy = _pixel_centres(output_dims, slide_dims)
    vals = np.clip(interp(gx, gy), arr[:, 2].min(), arr[:, 2].max())
    return HeatmapRaster(vals, provenance)


def normalize_attention(a: Sequence[float]) -> np.ndarray:
    """Min-max scale one bag's attention weights; a flat bag maps to all ones."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    if a.size == 0:
        raise ContractError("empty bag")
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.ones_like(a)
    return (a - lo) / (hi - lo)


def attention_heatmap(
    a: Sequence[float],
    tile_coords: Sequence[tuple[int, int]],
    output_dims: tuple[int, int],
    slide_dims: tuple[int, int] | None = None,
    patch: int = 512,
) -> HeatmapRaster:
    """Normalised attention over the bag's tiles; pixels outside every bag tile are 0."""
    norm = normalize_attention(a)
    coords = np.asarray(tile_coords, dtype=np.float64).reshape(-1, 2)
    if len(coords) != len(norm):
        raise ContractError("one tile coordinate per attention weight is required")
    centers = coords + patch / 2.0
    interp = CenterGridInterpolator(centers, norm)
    gx, gy = _pixel_centres(output_dims, slide_dims)
    covered = np.zeros(gx.shape, dtype=bool)
    for x, y in coords:
        covered |= (gx >= x) & (gx < x + patch) & (gy >= y) & (gy < y + patch)
    vals = np.where(covered, np.clip(interp(gx, gy), 0.0, 1.0), 0.0)
    return HeatmapRaster(vals, "attention", covered)


def write_heatmap_png(path: str | Path, raster: HeatmapRaster | np.ndarray) -> None:
    values = raster.values if isinstance(raster, HeatmapRaster) else raster
    write_gray(path, quantize_unit(values))


def write_heatmap_csv(path: str | Path, rows: Sequence[tuple[float, float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x_center", "y_center", "value"])
        for x, y, v in rows:
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def read_heatmap_csv(path: str | Path) -> list[tuple[float, float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            (float(r["x_center"]), float(r["y_center"]), float(r["value"]))
            for r in csv.DictReader(fh)
        ]
