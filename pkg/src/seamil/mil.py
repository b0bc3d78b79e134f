"""Attention-based multiple-instance aggregation and the bag-level (target) model."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    DimensionError,
    Parameter,
    Tensor,
    concat,
    dense,
    global_pool,
    matmul,
    reshape,
    sigmoid,
    softmax,
    tanh,
    transpose,
)
from .backbone import BackboneConfig, ConfigError
from .heads import glorot_uniform
from .models import SourceModel, backbone_param_names

__all__ = [
    "AGGREGATIONS",
    "MAX_BAG_SIZE",
    "Bag",
    "TargetModel",
    "embed_bag",
    "attention_weights",
    "aggregate",
    "predict_bag",
    "bag_decision",
]

AGGREGATIONS = ("bgas", "bgap", "bgmp")
MAX_BAG_SIZE = 300


@dataclass
class Bag:
    """One slide's ROI instances.

    ``instances`` holds either network inputs (``I x H x W x 3``) or cached
    embeddings (``I x C``); ``embedded`` says which.
    """

    slide_id: str
    instances: np.ndarray
    label: int
    instance_tile_ids: list[str] = field(default_factory=list)
    embedded: bool = False

    def __post_init__(self):
        n = len(self.instances)
        if not 1 <= n <= MAX_BAG_SIZE:
            raise ContractError(f"bag {self.slide_id!r} has {n} instances; need 1..{MAX_BAG_SIZE}")
        if self.instance_tile_ids and len(self.instance_tile_ids) != n:
            raise ContractError("instance_tile_ids length differs from instance count")

    def __len__(self) -> int:
        return len(self.instances)


def attention_weights(h: Tensor, v: Tensor, w: Tensor) -> Tensor:
    """``a_i = softmax_i(w^T tanh(V h_i))`` for an ``I x C`` embedding matrix.

    Returns a ``1 x I`` row.
    """
    if len(h.shape) != 2:
        raise DimensionError(f"embeddings must be I x C, got {h.shape}")
    if v.shape[1] != h.shape[1] or w.shape[0] != v.shape[0]:
        raise DimensionError(f"V {v.shape} / w {w.shape} do not fit embeddings {h.shape}")
    scores = matmul(tanh(matmul(h, transpose(v))), reshape(w, (v.shape[0], 1)))
    return softmax(reshape(scores, (1, h.shape[0])))


def aggregate(h: Tensor, mode: str, params: dict[str, Parameter] | None = None) -> Tensor:
    """Pool ``I x C`` instance embeddings into a ``1 x C`` bag embedding."""
    i, c = h.shape
    if i < 1:
        raise ContractError("cannot aggregate an empty bag")
    if mode == "bgas":
        a = attention_weights(h, params["mil.V"].tensor, params["mil.w"].tensor)
        return matmul(a, h)
    if mode == "bgap":
        return matmul(Tensor(np.full((1, i), 1.0 / i)), h)
    if mode == "bgmp":
        return reshape(global_pool(reshape(h, (i, 1, c)), "max"), (1, c))
    raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {mode!r}")


def predict_bag(z: Tensor, params: dict[str, Parameter]) -> Tensor:
    """Sigmoid bag probability ``1 x 1`` from a ``1 x C`` bag embedding."""
    w = params["bag_classifier.weights"].tensor
    if len(z.shape) == 1:
        z = reshape(z, (1, z.shape[0]))
    if z.shape[1] != w.shape[0]:
        raise DimensionError(f"bag embedding width {z.shape[1]} != classifier input {w.shape[0]}")
    return sigmoid(dense(z, w, params["bag_classifier.bias"].tensor))


def bag_decision(prob: float) -> int:
    """Malignant (1) at probability >= 0.5; the tie goes to malignant."""
    return int(prob >= 0.5)


@dataclass
class TargetModel:
    """Bag classifier whose backbone and head come from a source model."""

    config: BackboneConfig
    head: str
    params: dict[str, Parameter]
    aggregation: str = "bgas"
    attention_dim: int = 64
    mlp_hidden: int = 128

    @classmethod
    def from_source(
        cls,
        source: SourceModel,
        aggregation: str = "bgas",
        attention_dim: int = 64,
        rng: np.random.Generator | None = None,
        freeze_backbone: bool = False,
    ) -> "TargetModel":
        if aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}, got {aggregation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        params: dict[str, Parameter] = {}
        for name in backbone_param_names(source.params):
            src = source.params[name]
            frozen = True if freeze_backbone else src.frozen
            params[name] = Parameter(name, src.data.copy(), frozen=frozen)
        c = source.embedding_width
        params["mil.V"] = Parameter("mil.V", glorot_uniform(rng, (attention_dim, c)))
        params["mil.w"] = Parameter("mil.w", glorot_uniform(rng, (attention_dim, 1)))
        params["bag_classifier.weights"] = Parameter(
            "bag_classifier.weights", glorot_uniform(rng, (c, 1))
        )
        params["bag_classifier.bias"] = Parameter("bag_classifier.bias", np.zeros(1))
        return cls(
            copy.deepcopy(source.config), source.head, params, aggregation, attention_dim,
            source.mlp_hidden,
        )

    @property
    def embedding_width(self) -> int:
        return self.params["bag_classifier.weights"].data.shape[0]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def trainable(self, include_backbone: bool = True) -> list[Parameter]:
        out = []
        for name, p in self.params.items():
            if name.startswith(("mil.", "bag_classifier.")) or include_backbone:
                if self.aggregation != "bgas" and name.startswith("mil."):
                    continue
                out.append(p)
        return out

    def backbone(self) -> SourceModel:
        """A source-shaped view sharing this model's backbone parameters."""
        return SourceModel(self.config, self.head, self.params, self.mlp_hidden)

    def embed_bag(self, bag: Bag, chunk: int = 16) -> Tensor:
        return embed_bag(bag, self, chunk)

    def forward(self, bag: Bag) -> tuple[Tensor, Tensor | None]:
        """Bag probability (``1 x 1``) and, for bgas, the ``1 x I`` attention row."""
        h = self.embed_bag(bag)
        attn = None
        if self.aggregation == "bgas":
            attn = attention_weights(h, self.params["mil.V"].tensor, self.params["mil.w"].tensor)
            z = matmul(attn, h)
        else:
            z = aggregate(h, self.aggregation, self.params)
        return predict_bag(z, self.params), attn


def embed_bag(bag: Bag, model: TargetModel, chunk: int = 16) -> Tensor:
    """``I x C`` matrix whose row ``i`` is the head output for instance ``i``."""
    if len(bag.instances) == 0:
        raise ContractError("empty bag")
    if bag.embedded:
        emb = np.asarray(bag.instances, dtype=np.float64)
        if emb.shape[1] != model.embedding_width:
            raise DimensionError(
                f"cached embeddings are {emb.shape[1]} wide, model expects {model.embedding_width}"
            )
        return Tensor(emb)
    net = model.backbone()
    x = np.asarray(bag.instances, dtype=np.float64)
    parts = [net.embed(Tensor(x[i : i + chunk])) for i in range(0, len(x), chunk)]
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)
