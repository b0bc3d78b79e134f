"""Seed sweeps that compare model variants on fixed training data.

Every run is scored by its best validation accuracy, which is the epoch
training keeps, so a late divergence does not count against a variant
that had already learned.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Sequence

import numpy as np

from .mil import AGGREGATIONS, Bag
from .models import SourceModel
from .training import SourceTrainConfig, TargetTrainConfig, TrainResult, train_source, train_target


def kept_val_accuracy(result: TrainResult) -> float:
    """Validation accuracy logged at the epoch training kept."""
    val = [r["acc"] for r in result.log if r["split"] == "val"]
    if not val:
        raise ValueError("run has no validation rows")
    return float(val[result.best_epoch - 1]) if result.best_epoch > 0 else float(val[0])


def aggregation_sweep(
    train_bags: Sequence[Bag],
    val_bags: Sequence[Bag],
    source: SourceModel,
    seeds: Sequence[int],
    base: TargetTrainConfig,
    modes: Sequence[str] = AGGREGATIONS,
    known: dict[tuple[str, int], float] | None = None,
) -> dict[str, list[float]]:
    """Kept validation accuracy per aggregation mode and seed.

    ``known`` maps ``(mode, seed)`` to an accuracy already measured with the
    same settings; those runs are skipped.
    """
    known = known or {}
    out: dict[str, list[float]] = {}
    for mode in modes:
        accs = []
        for seed in seeds:
            if (mode, seed) in known:
                accs.append(known[(mode, seed)])
                continue
            cfg = replace(base, aggregation=mode, seed=seed)
            accs.append(kept_val_accuracy(train_target(train_bags, source, cfg, val_bags)))
        out[mode] = accs
    return out


def seanet_sweep(
    images: np.ndarray,
    labels: Sequence,
    val_images: np.ndarray,
    val_labels: Sequence,
    seeds: Sequence[int],
    base: SourceTrainConfig,
    known: dict[tuple[bool, int], float] | None = None,
) -> dict[bool, list[float]]:
    """Kept validation patch accuracy with the attention module on (True) and off (False).

    ``known`` maps ``(on, seed)`` to an accuracy already measured with the
    same settings.
    """
    known = known or {}
    out: dict[bool, list[float]] = {}
    for on in (True, False):
        accs = []
        for seed in seeds:
            if (on, seed) in known:
                accs.append(known[(on, seed)])
                continue
            cfg = replace(base, backbone=replace(base.backbone, seanet=on), seed=seed)
            accs.append(kept_val_accuracy(train_source(images, labels, cfg, val_images, val_labels)))
        out[on] = accs
    return out
