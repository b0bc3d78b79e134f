"""Glue between slides, tiles, source-model ROI selection and bags."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ManifestRecord, build_bag
from .heads import TUMOR
from .imaging import tile_to_input
from .mil import MAX_BAG_SIZE, Bag
from .models import SourceModel
from .tiling import SlideRaster, TileRecord, tile_slide

__all__ = [
    "TiledSlide",
    "tile_cohort",
    "tile_inputs",
    "labelled_patches",
    "roi_probabilities",
    "select_roi",
    "slide_bag",
]


@dataclass
class TiledSlide:
    record: ManifestRecord
    slide: SlideRaster
    tiles: list[TileRecord]
    excluded: int = 0
    inputs: np.ndarray | None = field(default=None, repr=False)


def tile_inputs(slide: SlideRaster, tiles: Sequence[TileRecord], size: int) -> np.ndarray:
    """Network inputs (``N x size x size x 3`` in [0, 1]) for ``tiles`` of ``slide``."""
    if not tiles:
        return np.zeros((0, size, size, 3))
    return np.stack(
        [tile_to_input(slide.pixels[t.y : t.y + t.size, t.x : t.x + t.size], size) for t in tiles]
    )


def tile_cohort(
    cohort: Sequence[tuple],
    input_size: int,
    patch: int = 512,
    overlap: float = 0.5,
    min_tissue: float = 0.20,
) -> list[TiledSlide]:
    """Tile every ``(slide, annotation, record, ...)`` entry and precompute its inputs."""
    out = []
    for entry in cohort:
        slide, annotation, record = entry[:3]
        tiles, excluded = tile_slide(slide, annotation, patch, overlap, min_tissue)
        out.append(TiledSlide(record, slide, tiles, excluded, tile_inputs(slide, tiles, input_size)))
    return out


def labelled_patches(
    tiled: Sequence[TiledSlide], patients: Sequence[str] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Stacked inputs and 0/1 tumor labels of annotated tiles (optionally for some patients)."""
    keep = None if patients is None else set(patients)
    xs, ys = [], []
    for ts in tiled:
        if keep is not None and ts.record.patient_id not in keep:
            continue
        for i, t in enumerate(ts.tiles):
            if t.region_label == "unlabeled":
                continue
            xs.append(ts.inputs[i])
            ys.append(int(t.region_label == "tumor"))
    if not xs:
        return np.zeros((0,)), np.zeros((0,), dtype=int)
    return np.stack(xs), np.asarray(ys, dtype=int)


def roi_probabilities(model: SourceModel, inputs: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Tumor probability for each input patch."""
    if len(inputs) == 0:
        return np.zeros(0)
    return model.predict(inputs, batch_size)[:, TUMOR]


def select_roi(tiles: Sequence, probs: Sequence[float]) -> list[int]:
    """Indices of tiles the source model calls tumor (ties count as tumor)."""
    p = np.asarray(probs, dtype=np.float64)
    return [i for i in range(len(tiles)) if p[i] >= 1.0 - p[i]]


def slide_bag(
    ts: TiledSlide,
    model: SourceModel,
    cap: int = MAX_BAG_SIZE,
    seed: int = 0,
    probs: np.ndarray | None = None,
) -> tuple[Bag, list[TileRecord]]:
    """Bag of the slide's ROI tiles and the tile records it holds, in bag order."""
    probs = roi_probabilities(model, ts.inputs) if probs is None else probs
    roi = select_roi(ts.tiles, probs)
    bag = build_bag(
        ts.record.slide_id, roi, ts.record.label, lambda i: ts.inputs[i], cap, seed,
        tile_id=lambda i: ts.tiles[i].tile_id,
    )
    by_id = {t.tile_id: t for t in ts.tiles}
    return bag, [by_id[t] for t in bag.instance_tile_ids]
