"""Projection heads, the two-class patch classifier, and class activation maps."""

from __future__ import annotations

import numpy as np

from .autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    dense,
    global_pool,
    relu,
    reshape,
    softmax,
)
from .imaging import bilinear_resize

__all__ = [
    "HEAD_KINDS",
    "UnsupportedHeadError",
    "glorot_uniform",
    "init_head",
    "init_patch_classifier",
    "project",
    "classify_patch",
    "patch_decision",
    "compute_cam",
    "normalize_minmax",
]

HEAD_KINDS = ("gap", "gmp", "mlp")
TUMOR, NON_TUMOR = 0, 1


class UnsupportedHeadError(ValueError):
    pass


def glorot_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def head_width(kind: str, channels: int, mlp_hidden: int = 128) -> int:
    return mlp_hidden if kind == "mlp" else channels


def init_head(
    kind: str,
    feature_shape: tuple[int, int, int],
    rng: np.random.Generator,
    mlp_hidden: int = 128,
) -> dict[str, Parameter]:
    if kind not in HEAD_KINDS:
        raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
    if kind != "mlp":
        return {}
    flat = int(np.prod(feature_shape))
    return {
        "head.mlp.weights": Parameter("head.mlp.weights", glorot_uniform(rng, (flat, mlp_hidden))),
        "head.mlp.bias": Parameter("head.mlp.bias", np.zeros(mlp_hidden)),
    }


def init_patch_classifier(width: int, rng: np.random.Generator) -> dict[str, Parameter]:
    return {
        "classifier.weights": Parameter("classifier.weights", glorot_uniform(rng, (width, 2))),
        "classifier.bias": Parameter("classifier.bias", np.zeros(2)),
    }


def project(a: Tensor, kind: str, params: dict[str, Parameter] | None = None) -> Tensor:
    """Map a refined feature volume to an embedding row (``N x width``)."""
    batched = len(a.shape) == 4
    n = a.shape[0] if batched else 1
    c = a.shape[-1]
    if kind == "gap":
        return reshape(global_pool(a, "avg"), (n, c))
    if kind == "gmp":
        return reshape(global_pool(a, "max"), (n, c))
    if kind == "mlp":
        flat = reshape(a, (n, int(np.prod(a.shape[-3:]))))
        return relu(dense(flat, params["head.mlp.weights"].tensor, params["head.mlp.bias"].tensor))
    raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")


def classify_patch(z: Tensor, clf: dict[str, Parameter]) -> Tensor:
    """Softmax over ``(tumor, non_tumor)`` logits; rows sum to one."""
    w = clf["classifier.weights"].tensor
    if len(z.shape) == 1:
        z = reshape(z, (1, z.shape[0]))
    if z.shape[1] != w.shape[0]:
        raise DimensionError(f"embedding width {z.shape[1]} != classifier input {w.shape[0]}")
    return softmax(dense(z, w, clf["classifier.bias"].tensor))


def patch_decision(probs: np.ndarray) -> np.ndarray:
    """1 where the tumor class wins; an exact tie counts as tumor."""
    probs = np.atleast_2d(probs)
    return (probs[:, TUMOR] >= probs[:, NON_TUMOR]).astype(int)


def normalize_minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = float(np.min(x)), float(np.max(x))
    if hi == lo:
        return np.full(x.shape, 0.5)
    return (x - lo) / (hi - lo)


def compute_cam(
    a: np.ndarray | Tensor,
    clf: dict[str, Parameter],
    class_index: int = TUMOR,
    head_kind: str = "gmp",
    out_size: tuple[int, int] = (224, 224),
) -> np.ndarray:
    """Channel-weighted class activation map over ``A``, scaled to ``[0, 1]``.

    A flat map (max == min) becomes a constant 0.5 raster.
    """
    if head_kind == "mlp":
        raise UnsupportedHeadError("CAM needs a channel-aligned head (gap or gmp), not mlp")
    vol = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    w = clf["classifier.weights"].data[:, class_index]
    if vol.shape[-1] != w.shape[0]:
        raise DimensionError(f"feature channels {vol.shape[-1]} != classifier rows {w.shape[0]}")
    cam = normalize_minmax(vol @ w)
    return np.clip(bilinear_resize(cam, out_size), 0.0, 1.0)
