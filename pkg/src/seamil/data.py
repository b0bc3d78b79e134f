"""Slide manifests, patient-level splits, instance dropout, bag sampling and
synthetic slides with known tumor/malignancy layout."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import ContractError
from .mil import MAX_BAG_SIZE
from .seeding import component_rng
from .tiling import SlideRaster

__all__ = [
    "BIOPSY_LABELS",
    "ManifestRecord",
    "FoldSplit",
    "EmptyBagError",
    "read_manifest",
    "write_manifest",
    "patient_level_split",
    "instance_dropout",
    "sample_bag_tiles",
    "build_bag",
    "generate_synthetic_slide",
    "generate_synthetic_cohort",
    "SyntheticLayout",
]

BIOPSY_LABELS = ("benign", "malignant")


class EmptyBagError(ContractError):
    """A slide has no ROI tiles and cannot form a bag."""


@dataclass
class ManifestRecord:
    slide_id: str
    patient_id: str
    biopsy_label: str
    image_path: str
    annotation_path: str | None = None

    def __post_init__(self):
        if self.biopsy_label not in BIOPSY_LABELS:
            raise ValueError(f"biopsy_label must be one of {BIOPSY_LABELS}, got {self.biopsy_label!r}")

    @property
    def label(self) -> int:
        return int(self.biopsy_label == "malignant")


def write_manifest(path: str | Path, records: Iterable[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r)) + "\n")


def read_manifest(path: str | Path) -> list[ManifestRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    ids = [r.slide_id for r in records]
    if len(set(ids)) != len(ids):
        raise ContractError("duplicate slide_id in manifest")
    return records


@dataclass
class FoldSplit:
    seed: int
    test_patients: list[str]
    folds: list[list[str]]

    @property
    def train_patients(self) -> list[str]:
        return [p for fold in self.folds for p in fold]

    def fold(self, k: int) -> tuple[list[str], list[str]]:
        """(train, validation) patients for cross-validation round ``k``."""
        val = list(self.folds[k])
        train = [p for i, f in enumerate(self.folds) if i != k for p in f]
        return train, val

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "test_patients": self.test_patients, "folds": self.folds}, indent=2
        )

    @classmethod
    def from_json(cls, text: str) -> "FoldSplit":
        d = json.loads(text)
        return cls(int(d["seed"]), list(d["test_patients"]), [list(f) for f in d["folds"]])


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _patient_labels(patients) -> dict[str, int]:
    labels: dict[str, int] = {}
    for item in patients:
        if isinstance(item, ManifestRecord):
            pid, lab = item.patient_id, item.label
        elif isinstance(item, str):
            pid, lab = item, 0
        else:
            pid, lab = item
            lab = int(lab == "malignant") if isinstance(lab, str) else int(lab)
        # a patient is malignant if any of its biopsies is
        labels[pid] = max(labels.get(pid, 0), lab)
    return labels


def patient_level_split(
    patients: Sequence, seed: int, n_folds: int = 4, test_fraction: float = 0.30
) -> FoldSplit:
    """Stratified patient-level test hold-out plus ``n_folds`` CV folds.

    ``patients`` may be manifest records, ``(patient_id, label)`` pairs or
    bare ids.  Several slides of one patient always land together.
    """
    labels = _patient_labels(patients)
    ids = sorted(labels)
    if len(ids) < n_folds + 1:
        raise ContractError(f"need at least {n_folds + 1} patients, got {len(ids)}")
    rng = component_rng(seed, "patient-split")
    by_class = {c: [p for p in ids if labels[p] == c] for c in (1, 0)}
    for c in by_class:
        rng.shuffle(by_class[c])

    n_test = _round_half_up(test_fraction * len(ids))
    # largest-remainder allocation of the test quota across classes
    quota = {c: n_test * len(v) / len(ids) for c, v in by_class.items()}
    take = {c: int(math.floor(q)) for c, q in quota.items()}
    for c in sorted(quota, key=lambda c: (-(quota[c] - take[c]), -c)):
        if sum(take.values()) >= n_test:
            break
        take[c] += 1
    test = by_class[1][: take[1]] + by_class[0][: take[0]]
    rest = by_class[1][take[1] :] + by_class[0][take[0] :]

    folds: list[list[str]] = [[] for _ in range(n_folds)]
    for i, p in enumerate(rest):
        folds[i % n_folds].append(p)
    return FoldSplit(int(seed), sorted(test), [sorted(f) for f in folds])


def instance_dropout(
    tiles: Sequence,
    seed: int,
    epoch: int,
    evaluation: bool = False,
    label_of: Callable = lambda t: t.region_label,
) -> list:
    """Randomly thin the non-tumor majority for one training epoch.

    Each non-tumor tile survives with ``p = min(1, N_tumor / N_non_tumor)``;
    tumor (and unlabeled) tiles always survive.  Evaluation returns every tile.
    """
    tiles = list(tiles)
    if evaluation:
        return tiles
    n_tumor = sum(1 for t in tiles if label_of(t) == "tumor")
    n_non = sum(1 for t in tiles if label_of(t) == "non_tumor")
    if n_non == 0 or n_non <= n_tumor:
        return tiles
    p = n_tumor / n_non
    rng = component_rng(seed, "instance-dropout", epoch)
    draws = rng.random(len(tiles))
    return [t for t, u in zip(tiles, draws) if label_of(t) != "non_tumor" or u < p]


def sample_bag_tiles(roi_tiles: Sequence, cap: int = MAX_BAG_SIZE, seed: int = 0, slide_id: str = "") -> list:
    """At most ``cap`` ROI tiles, drawn uniformly without replacement (grid order kept)."""
    roi_tiles = list(roi_tiles)
    if not roi_tiles:
        raise EmptyBagError(f"slide {slide_id!r} has no ROI tiles; it cannot be bagged")
    if len(roi_tiles) <= cap:
        return roi_tiles
    rng = component_rng(seed, "bag-sample", _stable_id(slide_id))
    idx = np.sort(rng.choice(len(roi_tiles), size=cap, replace=False))
    return [roi_tiles[i] for i in idx]


def _stable_id(text: str) -> int:
    import zlib

    return zlib.crc32(text.encode("utf-8"))


def build_bag(
    slide_id: str,
    roi_tiles: Sequence,
    label: int,
    load: Callable[[object], np.ndarray],
    cap: int = MAX_BAG_SIZE,
    seed: int = 0,
    tile_id: Callable = lambda t: t.tile_id,
):
    """Bag of up to ``cap`` ROI instances; ``load`` turns a tile into network input."""
    from .mil import Bag

    chosen = sample_bag_tiles(roi_tiles, cap, seed, slide_id)
    return Bag(
        slide_id=slide_id,
        instances=np.stack([load(t) for t in chosen]),
        label=int(label),
        instance_tile_ids=[tile_id(t) for t in chosen],
    )


# ---------------------------------------------------------------------------
# synthetic slides


@dataclass
class SyntheticLayout:
    """Ground truth of one synthetic slide, for tests."""

    tumor_side: str
    speckle_centers: list[tuple[float, float]] = field(default_factory=list)
    speckle_radius: float = 0.0

    def has_speckle(self, x: int, y: int, size: int) -> bool:
        """Whether the square tile at ``(x, y)`` overlaps a speckle disk."""
        for cx, cy in self.speckle_centers:
            dx = max(x - cx, 0.0, cx - (x + size))
            dy = max(y - cy, 0.0, cy - (y + size))
            if dx * dx + dy * dy < self.speckle_radius**2:
                return True
        return False


TUMOR_SIDES = ("left", "right", "top", "bottom")
_BG = np.array([244.0, 244.0, 244.0])
_PINK = np.array([232.0, 158.0, 205.0])
_NORMAL_NUCLEUS = np.array([178.0, 118.0, 196.0])
_TUMOR_NUCLEUS = np.array([92.0, 42.0, 132.0])
_SPECKLE = np.array([22.0, 14.0, 30.0])
_SPECKLE_HALO = np.array([246.0, 226.0, 240.0])


def _paint_ellipses(
    img: np.ndarray,
    allowed: np.ndarray,
    centers: np.ndarray,
    radii: np.ndarray,
    angles: np.ndarray,
    colors: np.ndarray,
) -> None:
    h, w = allowed.shape
    for (cx, cy), (ra, rb), th, col in zip(centers, radii, angles, colors):
        r = int(math.ceil(max(ra, rb))) + 1
        x0, x1 = max(0, int(cx) - r), min(w, int(cx) + r + 1)
        y0, y1 = max(0, int(cy) - r), min(h, int(cy) + r + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dx, dy = xx + 0.5 - cx, yy + 0.5 - cy
        c, s = math.cos(th), math.sin(th)
        u, v = (c * dx + s * dy) / ra, (-s * dx + c * dy) / rb
        sel = (u * u + v * v <= 1.0) & allowed[y0:y1, x0:x1]
        img[y0:y1, x0:x1][sel] = col


def _scatter(rng, region: np.ndarray, count: int) -> np.ndarray:
    ys, xs = np.nonzero(region)
    if len(xs) == 0 or count <= 0:
        return np.zeros((0, 2))
    pick = rng.integers(0, len(xs), size=count)
    return np.stack([xs[pick] + rng.random(count), ys[pick] + rng.random(count)], axis=1)


def generate_synthetic_slide(
    seed: int,
    size: tuple[int, int] = (1024, 1024),
    label: str = "benign",
    slide_id: str | None = None,
    patient_id: str | None = None,
    tumor_side: str | None = None,
    patch: int = 512,
    return_layout: bool = False,
):
    """Deterministic H&E-like slide with one annotated tumor half.

    The tissue is a mirror-symmetric ellipse on white glass; the tumor is
    the half of it on ``tumor_side`` (split on the slide midline), textured
    with dense dark nuclei.  Malignant slides add one cluster of
    near-black speckles inside the tumor, placed in the first tile band
    along the tumor edge so it shows up in only a couple of 50%-overlap
    tiles.  Sizes that are multiples of ``patch`` keep every tile's tumor
    share at exactly 0, 1/2 or 1.

    Returns ``(SlideRaster, annotation uint8 mask, ManifestRecord)`` and,
    with ``return_layout``, a :class:`SyntheticLayout` as well.
    """
    h, w = int(size[0]), int(size[1])
    if h < 1024 or w < 1024:
        raise ContractError(f"synthetic slides must be at least 1024x1024, got {w}x{h}")
    if label not in BIOPSY_LABELS:
        raise ValueError(f"label must be one of {BIOPSY_LABELS}")
    rng = component_rng(seed, "synthetic-slide")
    slide_id = slide_id or f"syn{seed:05d}"
    patient_id = patient_id or f"P{slide_id}"
    side = tumor_side or TUMOR_SIDES[int(rng.integers(0, 4))]
    if side not in TUMOR_SIDES:
        raise ValueError(f"tumor_side must be one of {TUMOR_SIDES}")

    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx + 0.5 - w / 2.0
    dy = yy + 0.5 - h / 2.0
    a = w * rng.uniform(0.43, 0.47)
    b = h * rng.uniform(0.43, 0.47)
    wobble = 1.0 + 0.03 * np.cos(4.0 * np.arctan2(np.abs(dy), np.abs(dx)))
    tissue = (dx / a) ** 2 + (dy / b) ** 2 <= wobble**2
    half = {"left": dx < 0, "right": dx > 0, "top": dy < 0, "bottom": dy > 0}[side]
    tumor = tissue & half
    del yy, xx

    img = _BG + rng.normal(0.0, 2.0, size=(h, w, 3))
    pink = _PINK + rng.normal(0.0, 5.0, size=(h, w, 3))
    img[tissue] = pink[tissue]
    del pink

    area = float(np.count_nonzero(tissue))
    n_normal = int(area / 2500)
    centers = _scatter(rng, tissue & ~tumor, n_normal)
    radii = rng.uniform(4.0, 6.0, size=(len(centers), 2))
    colors = _NORMAL_NUCLEUS + rng.normal(0.0, 6.0, size=(len(centers), 3))
    _paint_ellipses(img, tissue & ~tumor, centers, radii, rng.uniform(0, np.pi, len(centers)), colors)

    tumor_area = float(np.count_nonzero(tumor))
    n_tumor = int(tumor_area / 420)
    centers = _scatter(rng, tumor, n_tumor)
    radii = np.stack(
        [rng.uniform(8.0, 12.0, len(centers)), rng.uniform(6.0, 9.0, len(centers))], axis=1
    )
    colors = _TUMOR_NUCLEUS + rng.normal(0.0, 8.0, size=(len(centers), 3))
    _paint_ellipses(img, tumor, centers, radii, rng.uniform(0, np.pi, len(centers)), colors)

    layout = SyntheticLayout(side)
    if label == "malignant":
        stride = patch // 2
        radius = 0.18 * stride
        edge = 0.74 * stride
        along = 0.5 * stride * (1 if rng.random() < 0.5 else -1)
        if side == "left":
            cx, cy = edge, h / 2.0 + along
        elif side == "right":
            cx, cy = w - edge, h / 2.0 + along
        elif side == "top":
            cx, cy = w / 2.0 + along, edge
        else:
            cx, cy = w / 2.0 + along, h - edge
        layout.speckle_centers.append((cx, cy))
        layout.speckle_radius = radius
        _paint_ellipses(
            img, tumor, np.array([[cx, cy]]), np.array([[radius, radius]]), [0.0], [_SPECKLE_HALO]
        )
        gy, gx = np.ogrid[0:h, 0:w]
        disk = tumor & ((gx + 0.5 - cx) ** 2 + (gy + 0.5 - cy) ** 2 <= radius**2)
        n_dots = 24
        dots = _scatter(rng, disk, n_dots)
        dradii = np.repeat(rng.uniform(8.0, 10.0, size=(len(dots), 1)), 2, axis=1)
        dcolors = _SPECKLE + rng.normal(0.0, 4.0, size=(len(dots), 3))
        _paint_ellipses(img, disk, dots, dradii, np.zeros(len(dots)), dcolors)

    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    annotation = np.where(tumor, 255, 0).astype(np.uint8)
    slide = SlideRaster(slide_id, pixels)
    record = ManifestRecord(slide_id, patient_id, label, f"slides/{slide_id}.png",
                            f"annotations/{slide_id}_mask.png")
    if return_layout:
        return slide, annotation, record, layout
    return slide, annotation, record


def generate_synthetic_cohort(
    n_slides: int,
    seed: int,
    malignant_fraction: float = 0.5,
    size: tuple[int, int] = (1024, 1024),
    return_layout: bool = False,
) -> list[tuple]:
    """``n_slides`` synthetic slides, one per patient, ``round(n * frac)`` malignant."""
    if not 0.0 <= malignant_fraction <= 1.0:
        raise ValueError("malignant_fraction must lie in [0, 1]")
    n_mal = _round_half_up(n_slides * malignant_fraction)
    rng = component_rng(seed, "synthetic-cohort")
    labels = np.array(["malignant"] * n_mal + ["benign"] * (n_slides - n_mal))
    rng.shuffle(labels)
    slide_seeds = rng.integers(0, 2**31 - 1, size=n_slides)
    out = []
    for i in range(n_slides):
        sid = f"syn{seed:04d}_{i:03d}"
        out.append(
            generate_synthetic_slide(
                int(slide_seeds[i]), size, str(labels[i]), sid, f"patient_{seed:04d}_{i:03d}",
                return_layout=return_layout,
            )
        )
    return out
