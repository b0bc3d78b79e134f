"""Tissue masking and overlapping patch grids for slide rasters at working level."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .autodiff import ContractError

__all__ = [
    "SlideRaster",
    "TissueMask",
    "TileRecord",
    "magenta_channel",
    "histogram256",
    "otsu_threshold",
    "tissue_mask",
    "tile_grid",
    "tissue_fraction",
    "keep_tile",
    "assign_region_label",
    "tile_slide",
    "tile_filename",
    "write_tile_index",
    "read_tile_index",
    "REGION_LABELS",
]

REGION_LABELS = ("tumor", "non_tumor", "unlabeled")


@dataclass
class SlideRaster:
    slide_id: str
    pixels: np.ndarray  # H x W x 3 uint8 at working level
    source_magnification: str = "40x"
    working_level_downsample_factor: int = 4

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class TissueMask:
    mask: np.ndarray  # bool, same H x W as the slide
    otsu_threshold: int


@dataclass
class TileRecord:
    slide_id: str
    row: int
    col: int
    x: int
    y: int
    size: int
    tissue_fraction: float
    region_label: str = "unlabeled"

    @property
    def tile_id(self) -> str:
        return f"{self.slide_id}_r{self.row}_c{self.col}"

    @property
    def center(self) -> tuple[float, float]:
        return self.x + self.size / 2.0, self.y + self.size / 2.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), separators=(", ", ": "))

    @classmethod
    def from_dict(cls, d: dict) -> "TileRecord":
        return cls(
            slide_id=str(d["slide_id"]),
            row=int(d["row"]),
            col=int(d["col"]),
            x=int(d["x"]),
            y=int(d["y"]),
            size=int(d["size"]),
            tissue_fraction=float(d["tissue_fraction"]),
            region_label=str(d["region_label"]),
        )


def magenta_channel(rgb: np.ndarray) -> np.ndarray:
    """CMY magenta component ``255 - G`` of an 8-bit RGB raster."""
    rgb = np.asarray(rgb)
    return (255 - rgb[..., 1].astype(np.int32)).astype(np.uint8)


def histogram256(gray: np.ndarray) -> np.ndarray:
    return np.bincount(np.asarray(gray, dtype=np.uint8).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(histogram) -> int:
    """Threshold ``t`` maximising between-class variance; foreground is ``> t``.

    The variance ``w0 w1 (mu0 - mu1)^2`` equals
    ``(S0 N - S n0)^2 / (N^2 n0 n1)`` in counts, so candidates are compared
    as exact integer fractions.  Ties resolve to the smallest ``t``.  A
    histogram with a single occupied bin returns that bin.
    """
    hist = [int(v) for v in histogram]
    if len(hist) != 256:
        raise ContractError(f"histogram needs 256 bins, got {len(hist)}")
    if any(v < 0 for v in hist):
        raise ContractError("histogram counts must be non-negative")
    total = sum(hist)
    if total <= 0:
        raise ContractError("histogram is empty")
    occupied = [i for i, v in enumerate(hist) if v]
    if len(occupied) == 1:
        return occupied[0]
    moment = sum(i * v for i, v in enumerate(hist))

    best_t, best_num, best_den = 0, -1, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += hist[t]
        s0 += t * hist[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            num, den = (s0 * total - moment * n0) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def tissue_mask(rgb: np.ndarray) -> TissueMask:
    """Otsu on the slide-wide magenta histogram; tissue is above threshold."""
    m = magenta_channel(rgb)
    t = otsu_threshold(histogram256(m))
    return TissueMask(m > t, t)


def _axis_positions(length: int, patch: int, stride: int) -> list[int]:
    pos = list(range(0, length - patch + 1, stride))
    if pos[-1] + patch < length:
        pos.append(length - patch)
    return pos


def tile_grid(width: int, height: int, patch: int = 512, overlap: float = 0.5) -> list[tuple[int, int]]:
    """Top-left corners of an overlapping grid, row-major, covering every pixel.

    When the regular stride does not reach an edge, one extra position
    clamped to ``dim - patch`` is appended.
    """
    if width < patch or height < patch:
        raise ContractError(f"image {width}x{height} smaller than patch {patch}")
    if not 0 <= overlap < 1:
        raise ContractError(f"overlap must lie in [0, 1), got {overlap}")
    stride = max(1, int(round(patch * (1 - overlap))))
    xs = _axis_positions(width, patch, stride)
    ys = _axis_positions(height, patch, stride)
    return [(x, y) for y in ys for x in xs]


def grid_axes(width: int, height: int, patch: int = 512, overlap: float = 0.5) -> tuple[list[int], list[int]]:
    stride = max(1, int(round(patch * (1 - overlap))))
    return _axis_positions(width, patch, stride), _axis_positions(height, patch, stride)


def tissue_fraction(x: int, y: int, size: int, mask: np.ndarray | TissueMask) -> float:
    m = mask.mask if isinstance(mask, TissueMask) else mask
    h, w = m.shape
    if x < 0 or y < 0 or x + size > w or y + size > h:
        raise ContractError(f"tile ({x}, {y}, {size}) outside mask {w}x{h}")
    return float(np.count_nonzero(m[y : y + size, x : x + size])) / float(size * size)


def keep_tile(fraction: float, min_tissue: float = 0.20) -> bool:
    """Tiles with less than ``min_tissue`` tissue are dropped; the boundary is kept."""
    return fraction >= min_tissue


def assign_region_label(
    x: int,
    y: int,
    size: int,
    annotation: np.ndarray | None,
    mask: np.ndarray | TissueMask,
) -> str:
    """``tumor`` when at least half of the tile's tissue lies inside the annotation."""
    if annotation is None:
        return "unlabeled"
    m = mask.mask if isinstance(mask, TissueMask) else mask
    if annotation.shape[:2] != m.shape:
        raise ContractError(
            f"annotation {annotation.shape[:2]} not aligned with tissue mask {m.shape}"
        )
    tissue = m[y : y + size, x : x + size]
    inside = np.count_nonzero(tissue & (annotation[y : y + size, x : x + size] != 0))
    total = np.count_nonzero(tissue)
    if total == 0:
        return "non_tumor"
    return "tumor" if 2 * inside >= total else "non_tumor"


def tile_slide(
    slide: SlideRaster,
    annotation: np.ndarray | None = None,
    patch: int = 512,
    overlap: float = 0.5,
    min_tissue: float = 0.20,
    mask: TissueMask | None = None,
) -> tuple[list[TileRecord], int]:
    """Kept tiles of one slide plus the number excluded by the tissue filter."""
    mask = mask if mask is not None else tissue_mask(slide.pixels)
    xs, ys = grid_axes(slide.width, slide.height, patch, overlap)
    if slide.width < patch or slide.height < patch:
        raise ContractError(f"slide {slide.slide_id} smaller than patch {patch}")
    kept, excluded = [], 0
    for row, y in enumerate(ys):
        for col, x in enumerate(xs):
            frac = tissue_fraction(x, y, patch, mask)
            if not keep_tile(frac, min_tissue):
                excluded += 1
                continue
            label = assign_region_label(x, y, patch, annotation, mask)
            kept.append(TileRecord(slide.slide_id, row, col, x, y, patch, frac, label))
    return kept, excluded


def tile_filename(record: TileRecord) -> str:
    return f"{record.tile_id}.png"


def write_tile_index(path: str | Path, records: Iterable[TileRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_tile_index(path: str | Path) -> list[TileRecord]:
    return list(iter_tile_index(path))


def iter_tile_index(path: str | Path) -> Iterator[TileRecord]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield TileRecord.from_dict(json.loads(line))
