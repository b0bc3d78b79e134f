"""Source (patch-level ROI) model: extractor -> attention module -> head -> softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor
from .backbone import (
    BackboneConfig,
    attention_refine,
    extract_features,
    init_attention_module,
    init_feature_extractor,
)
from .heads import classify_patch, head_width, init_head, init_patch_classifier, project

__all__ = ["SourceModel", "backbone_param_names", "BACKBONE_PREFIXES"]

BACKBONE_PREFIXES = ("extractor.", "attention.", "head.")


def backbone_param_names(params: dict[str, Parameter]) -> list[str]:
    """Names transferred from a source to a target model (classifier excluded)."""
    return [k for k in params if k.startswith(BACKBONE_PREFIXES)]


@dataclass
class SourceModel:
    config: BackboneConfig
    head: str
    params: dict[str, Parameter]
    mlp_hidden: int = 128

    @classmethod
    def init(
        cls,
        config: BackboneConfig,
        head: str = "gmp",
        rng: np.random.Generator | None = None,
        mlp_hidden: int = 128,
    ) -> "SourceModel":
        rng = rng if rng is not None else np.random.default_rng(0)
        params = init_feature_extractor(config, rng)
        if config.seanet:
            params.update(init_attention_module(config, rng))
        fh, fw = config.feature_size
        params.update(init_head(head, (fh, fw, config.channels), rng, mlp_hidden))
        params.update(init_patch_classifier(head_width(head, config.channels, mlp_hidden), rng))
        return cls(config, head, params, mlp_hidden)

    @property
    def embedding_width(self) -> int:
        return head_width(self.head, self.config.channels, self.mlp_hidden)

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def refine(self, images: Tensor) -> Tensor:
        f = extract_features(images, self.params, self.config)
        return attention_refine(f, self.params, self.config)

    def embed(self, images: Tensor) -> Tensor:
        return project(self.refine(images), self.head, self.params)

    def forward(self, images: Tensor) -> Tensor:
        """``N x 2`` probabilities ordered ``(tumor, non_tumor)``."""
        return classify_patch(self.embed(images), self.params)

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        out = [
            self.forward(Tensor(images[i : i + batch_size])).data
            for i in range(0, len(images), batch_size)
        ]
        return np.concatenate(out, axis=0)
