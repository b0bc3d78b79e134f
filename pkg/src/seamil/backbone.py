"""VGG-style feature extractor and the SE-gated 1x1-conv attention module."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import (
    DimensionError,
    Parameter,
    Tensor,
    add,
    conv2d,
    dense,
    global_pool,
    max_pool2d,
    mul,
    relu,
    reshape,
    sigmoid,
    transpose,
)

__all__ = [
    "ConfigError",
    "BackboneConfig",
    "init_feature_extractor",
    "init_attention_module",
    "extract_features",
    "se_block",
    "attention_refine",
    "he_uniform",
]


class ConfigError(ValueError):
    """Architecture settings that cannot produce a valid network."""


@dataclass
class BackboneConfig:
    block_channel_widths: list[int] = field(default_factory=lambda: [8, 16, 32])
    convs_per_block: int = 2
    frozen_blocks: int = 0
    input_size: tuple[int, int, int] = (224, 224, 3)
    se_reduction_ratio: int = 4
    attention_filter_schedule: list[int] | None = None
    seanet: bool = True

    def __post_init__(self):
        self.block_channel_widths = [int(c) for c in self.block_channel_widths]
        self.input_size = tuple(int(v) for v in self.input_size)
        if self.attention_filter_schedule is None:
            c = self.channels
            self.attention_filter_schedule = [c, c // 2, c // 4, c // 2, c]
        else:
            self.attention_filter_schedule = [int(c) for c in self.attention_filter_schedule]
        self.validate()

    @property
    def channels(self) -> int:
        return self.block_channel_widths[-1]

    @property
    def feature_size(self) -> tuple[int, int]:
        f = 2 ** len(self.block_channel_widths)
        return self.input_size[0] // f, self.input_size[1] // f

    @property
    def last_reduction(self) -> int:
        """Index into the schedule of the narrowest (sigmoid-gated) layer."""
        sched = self.attention_filter_schedule
        return int(np.argmin(sched))

    def validate(self) -> None:
        widths = self.block_channel_widths
        if not widths or any(c < 1 for c in widths):
            raise ConfigError(f"block widths must be positive, got {widths}")
        if self.convs_per_block < 1:
            raise ConfigError("convs_per_block must be >= 1")
        if not 0 <= self.frozen_blocks < len(widths):
            raise ConfigError(
                f"frozen_blocks={self.frozen_blocks} must be < number of blocks {len(widths)}"
            )
        h, w, d = self.input_size
        f = 2 ** len(widths)
        if h % f or w % f:
            raise ConfigError(f"input {h}x{w} not divisible by 2^{len(widths)}")
        if d != 3:
            raise ConfigError("input must have 3 channels")
        if not self.seanet:
            return
        sched = self.attention_filter_schedule
        if len(sched) < 3 or sched[0] != self.channels or sched[-1] != self.channels:
            raise ConfigError(
                f"attention schedule {sched} must start and end at C={self.channels}"
            )
        m = self.last_reduction
        down, up = sched[: m + 1], sched[m:]
        if m == 0 or m == len(sched) - 1:
            raise ConfigError(f"attention schedule {sched} must shrink and then grow")
        if any(b >= a for a, b in zip(down, down[1:])) or any(b <= a for a, b in zip(up, up[1:])):
            raise ConfigError(f"attention schedule {sched} must strictly shrink then strictly grow")
        r = self.se_reduction_ratio
        for width in sched[1 : m + 1]:
            if width % r:
                raise ConfigError(f"SE reduction ratio {r} does not divide width {width}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_feature_extractor(config: BackboneConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    cin = config.input_size[2]
    for b, width in enumerate(config.block_channel_widths):
        frozen = b < config.frozen_blocks
        for j in range(config.convs_per_block):
            name = f"extractor.block{b}.conv{j}"
            params[f"{name}.kernel"] = Parameter(
                f"{name}.kernel", he_uniform(rng, (3, 3, cin, width), 9 * cin), frozen=frozen
            )
            params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(width), frozen=frozen)
            cin = width
    return params


def init_attention_module(config: BackboneConfig, rng: np.random.Generator) -> dict[str, Parameter]:
    sched = config.attention_filter_schedule
    r = config.se_reduction_ratio
    params: dict[str, Parameter] = {}
    for i in range(1, len(sched)):
        cin, cout = sched[i - 1], sched[i]
        name = f"attention.conv{i}"
        params[f"{name}.kernel"] = Parameter(
            f"{name}.kernel", he_uniform(rng, (1, 1, cin, cout), cin)
        )
        params[f"{name}.bias"] = Parameter(f"{name}.bias", np.zeros(cout))
        if i <= config.last_reduction:
            se = f"attention.se{i}"
            params[f"{se}.w1"] = Parameter(f"{se}.w1", he_uniform(rng, (cout // r, cout), cout))
            params[f"{se}.w2"] = Parameter(f"{se}.w2", he_uniform(rng, (cout, cout // r), cout // r))
    return params


def _conv_bias(x: Tensor, kernel: Parameter, bias: Parameter) -> Tensor:
    return add(conv2d(x, kernel.tensor, 1, "same"), bias.tensor)


def extract_features(image: Tensor, params: dict[str, Parameter], config: BackboneConfig) -> Tensor:
    """Run the conv/pool blocks on ``H x W x 3`` (or batched) images in ``[0, 1]``."""
    spatial = image.shape[-3:]
    if tuple(spatial) != tuple(config.input_size):
        raise DimensionError(f"extractor expects input {config.input_size}, got {spatial}")
    h = image
    for b in range(len(config.block_channel_widths)):
        for j in range(config.convs_per_block):
            name = f"extractor.block{b}.conv{j}"
            h = relu(_conv_bias(h, params[f"{name}.kernel"], params[f"{name}.bias"]))
        h = max_pool2d(h, 2)
    return h


def se_block(g: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Squeeze-and-excitation: scale each channel of ``g`` by ``sigmoid(W2 relu(W1 s))``.

    ``s`` is the per-channel spatial mean of ``g``; ``w1`` is ``R/r x R`` and
    ``w2`` is ``R x R/r``.
    """
    r_ch = g.shape[-1]
    if w1.shape[1] != r_ch or w2.shape[0] != r_ch or w1.shape[0] != w2.shape[1]:
        raise ConfigError(
            f"SE weights {w1.shape}/{w2.shape} do not fit {r_ch} input channels"
        )
    batched = len(g.shape) == 4
    n = g.shape[0] if batched else 1
    s = reshape(global_pool(g, "avg"), (n, r_ch))
    excite = sigmoid(dense(relu(dense(s, transpose(w1))), transpose(w2)))
    scale = reshape(excite, (n, 1, 1, r_ch) if batched else (1, 1, r_ch))
    return mul(g, scale)


def attention_refine(f: Tensor, params: dict[str, Parameter], config: BackboneConfig) -> Tensor:
    """Refined map ``A = F * M`` where ``M`` is the 1x1-conv autoencoder mask.

    Reduction layers use ReLU except the narrowest one, which is sigmoid
    gated; an SE block follows every reduction layer.  Expansion layers are
    linear.  With ``config.seanet`` off this is the identity.
    """
    if not config.seanet:
        return f
    sched = config.attention_filter_schedule
    if f.shape[-1] != sched[0]:
        raise ConfigError(f"feature map has {f.shape[-1]} channels, schedule expects {sched[0]}")
    m = config.last_reduction
    h = f
    for i in range(1, len(sched)):
        name = f"attention.conv{i}"
        h = _conv_bias(h, params[f"{name}.kernel"], params[f"{name}.bias"])
        if i < m:
            h = relu(h)
        elif i == m:
            h = sigmoid(h)
        if i <= m:
            se = f"attention.se{i}"
            h = se_block(h, params[f"{se}.w1"].tensor, params[f"{se}.w2"].tensor)
    return mul(f, h)
