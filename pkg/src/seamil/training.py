"""Source (patch) and target (bag) training loops, plus model <-> checkpoint glue."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ContractError, Parameter, Tape, Tensor, bce_loss, matmul, mul, sgd_step
from .backbone import BackboneConfig, ConfigError
from .checkpoint import Checkpoint
from .data import instance_dropout
from .heads import patch_decision
from .mil import Bag, TargetModel, bag_decision
from .models import SourceModel
from .seeding import component_rng

__all__ = [
    "SourceTrainConfig",
    "TargetTrainConfig",
    "TrainResult",
    "train_source",
    "train_target",
    "source_to_checkpoint",
    "source_from_checkpoint",
    "target_to_checkpoint",
    "target_from_checkpoint",
    "check_compatible",
    "cache_embeddings",
    "write_log_csv",
    "read_log_csv",
]

log = logging.getLogger(__name__)

_TUMOR_COLUMN = Tensor(np.array([[1.0], [0.0]]))


@dataclass
class SourceTrainConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: str = "gmp"
    epochs: int = 120
    lr: float = 0.001
    batch_size: int = 64
    momentum: float = 0.0
    seed: int = 0
    instance_dropout: bool = True
    micro_batch: int = 16
    mlp_hidden: int = 128

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1 or self.micro_batch < 1:
            raise ConfigError("epochs/lr must be non-negative and batch sizes positive")


@dataclass
class TargetTrainConfig:
    epochs: int = 100
    lr: float = 0.001
    bag_cap: int = 300
    aggregation: str = "bgas"
    attention_dim: int = 64
    seed: int = 0
    freeze_backbone: bool = False
    momentum: float = 0.0

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.attention_dim < 1:
            raise ConfigError("epochs/lr must be non-negative and attention_dim positive")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: object
    best_epoch: int


def _snapshot(params: dict[str, Parameter]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


def _as_binary(labels) -> np.ndarray:
    out = []
    for y in labels:
        if isinstance(y, str):
            if y not in ("tumor", "non_tumor"):
                raise ContractError(f"source training needs tumor/non_tumor labels, got {y!r}")
            out.append(1 if y == "tumor" else 0)
        else:
            out.append(int(y))
    return np.asarray(out, dtype=int)


def _source_metrics(model: SourceModel, images: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    probs = model.predict(images)
    p = np.clip(probs[:, 0], 1e-7, 1 - 1e-7)
    loss = float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())
    acc = float((patch_decision(probs) == y).mean())
    return loss, acc


def train_source(
    images: np.ndarray,
    labels: Sequence,
    config: SourceTrainConfig,
    val_images: np.ndarray | None = None,
    val_labels: Sequence | None = None,
    model: SourceModel | None = None,
) -> TrainResult:
    """Mini-batch SGD on BCE of the tumor-class softmax probability.

    Tumor is the positive class (1).  Non-tumor tiles are thinned by
    instance dropout each epoch; the epoch with the best validation accuracy
    (training accuracy when no validation set is given; ties -> earlier)
    is kept.
    """
    images = np.asarray(images, dtype=np.float64)
    y = _as_binary(labels)
    if len(images) != len(y):
        raise ContractError("images and labels differ in length")
    if len(set(y.tolist())) < 2:
        raise ContractError("source training needs both tumor and non_tumor tiles")
    has_val = val_images is not None and val_labels is not None and len(val_labels) > 0
    if has_val:
        val_images = np.asarray(val_images, dtype=np.float64)
        val_y = _as_binary(val_labels)

    if model is None:
        model = SourceModel.init(
            config.backbone, config.head, component_rng(config.seed, "source-init"), config.mlp_hidden
        )
    params = model.parameters()
    region = np.where(y == 1, "tumor", "non_tumor")

    best = (-1.0, 0, _snapshot(model.params))
    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        idx = np.arange(len(y))
        if config.instance_dropout:
            idx = np.asarray(
                instance_dropout(idx, config.seed, epoch, label_of=lambda i: region[i]), dtype=int
            )
        idx = idx[component_rng(config.seed, "source-shuffle", epoch).permutation(len(idx))]
        losses, hits = [], 0
        for start in range(0, len(idx), config.batch_size):
            batch = idx[start : start + config.batch_size]
            for m0 in range(0, len(batch), config.micro_batch):
                mb = batch[m0 : m0 + config.micro_batch]
                with Tape() as tape:
                    probs = model.forward(Tensor(images[mb]))
                    p_tumor = matmul(probs, _TUMOR_COLUMN)
                    loss = bce_loss(p_tumor, y[mb].reshape(-1, 1).astype(float))
                    scaled = mul(loss, len(mb) / len(batch))
                tape.backward(scaled)
                losses.append(loss.item() * len(mb))
                hits += int((patch_decision(probs.data) == y[mb]).sum())
            sgd_step(params, config.lr, config.momentum)
        train_loss = float(np.sum(losses) / max(1, len(idx)))
        train_acc = hits / max(1, len(idx))
        history.append({"epoch": epoch, "split": "train", "loss": train_loss, "acc": train_acc})
        score = train_acc
        if has_val:
            vloss, vacc = _source_metrics(model, val_images, val_y)
            history.append({"epoch": epoch, "split": "val", "loss": vloss, "acc": vacc})
            score = vacc
        if score > best[0]:
            best = (score, epoch, _snapshot(model.params))
        log.info("source epoch %d loss %.4f acc %.3f", epoch, train_loss, train_acc)

    _, best_epoch, weights = best
    for k, arr in weights.items():
        model.params[k].tensor.data = arr
    ckpt = source_to_checkpoint(model, config.seed, config.epochs, best_epoch)
    return TrainResult(ckpt, history, model, best_epoch)


def cache_embeddings(bags: Sequence[Bag], model: TargetModel) -> list[Bag]:
    """Replace instance images by their (fixed) backbone embeddings."""
    out = []
    for bag in bags:
        if bag.embedded:
            out.append(bag)
            continue
        emb = model.embed_bag(bag).data.copy()
        out.append(Bag(bag.slide_id, emb, bag.label, list(bag.instance_tile_ids), embedded=True))
    return out


def _bag_metrics(model: TargetModel, bags: Sequence[Bag]) -> tuple[float, float]:
    losses, hits = [], 0
    for bag in bags:
        p = float(model.forward(bag)[0].data.reshape(-1)[0])
        pc = min(max(p, 1e-7), 1 - 1e-7)
        losses.append(-(bag.label * np.log(pc) + (1 - bag.label) * np.log(1 - pc)))
        hits += int(bag_decision(p) == bag.label)
    return float(np.mean(losses)), hits / len(bags)


def train_target(
    bags: Sequence[Bag],
    source: SourceModel | Checkpoint,
    config: TargetTrainConfig,
    val_bags: Sequence[Bag] | None = None,
    expected_backbone: BackboneConfig | None = None,
) -> TrainResult:
    """One SGD step per bag on the bag-level BCE.

    The backbone and projection head start from the source model; the
    source classifier is dropped, and the attention aggregator plus bag
    classifier are freshly initialised.  With ``freeze_backbone`` the
    instance embeddings are computed once and only the MIL layers train.
    """
    if isinstance(source, Checkpoint):
        if expected_backbone is not None:
            check_compatible(source, expected_backbone)
        source = source_from_checkpoint(source)
    elif expected_backbone is not None:
        check_compatible(source_to_checkpoint(source, 0, 0), expected_backbone)
    if not bags:
        raise ContractError("no training bags")
    for bag in list(bags) + list(val_bags or []):
        if len(bag) > config.bag_cap:
            raise ContractError(f"bag {bag.slide_id} exceeds cap {config.bag_cap}")
    model = TargetModel.from_source(
        source,
        config.aggregation,
        config.attention_dim,
        component_rng(config.seed, "target-init"),
        freeze_backbone=config.freeze_backbone,
    )
    bags = list(bags)
    val_bags = list(val_bags or [])
    if config.freeze_backbone:
        bags = cache_embeddings(bags, model)
        val_bags = cache_embeddings(val_bags, model)
    params = model.trainable(include_backbone=not config.freeze_backbone)

    best = (-1.0, 0, _snapshot(model.params))
    history: list[dict] = []
    for epoch in range(1, config.epochs + 1):
        order = component_rng(config.seed, "target-shuffle", epoch).permutation(len(bags))
        losses, hits = [], 0
        for i in order:
            bag = bags[i]
            with Tape() as tape:
                prob, _ = model.forward(bag)
                loss = bce_loss(prob, float(bag.label))
            tape.backward(loss)
            sgd_step(params, config.lr, config.momentum)
            losses.append(loss.item())
            hits += int(bag_decision(float(prob.data.reshape(-1)[0])) == bag.label)
        train_loss, train_acc = float(np.mean(losses)), hits / len(bags)
        history.append({"epoch": epoch, "split": "train", "loss": train_loss, "acc": train_acc})
        score = train_acc
        if val_bags:
            vloss, vacc = _bag_metrics(model, val_bags)
            history.append({"epoch": epoch, "split": "val", "loss": vloss, "acc": vacc})
            score = vacc
        if score > best[0]:
            best = (score, epoch, _snapshot(model.params))
        log.info("target epoch %d loss %.4f acc %.3f", epoch, train_loss, train_acc)

    _, best_epoch, weights = best
    for k, arr in weights.items():
        model.params[k].tensor.data = arr
    ckpt = target_to_checkpoint(model, config.seed, config.epochs, best_epoch)
    return TrainResult(ckpt, history, model, best_epoch)


# ---------------------------------------------------------------------------
# checkpoint conversion


def _architecture(model, kind: str) -> dict:
    arch = {"backbone": model.config.to_dict(), "head": model.head, "mlp_hidden": model.mlp_hidden}
    if kind == "target":
        arch["aggregation"] = model.aggregation
        arch["attention_dim"] = model.attention_dim
    arch["frozen"] = sorted(k for k, p in model.params.items() if p.frozen)
    return arch


def source_to_checkpoint(model: SourceModel, seed: int, epochs: int, best_epoch: int = 0) -> Checkpoint:
    return Checkpoint(
        "source",
        _architecture(model, "source"),
        {k: p.data for k, p in model.params.items()},
        seed=seed,
        epochs=epochs,
        extra={"best_epoch": best_epoch},
    )


def target_to_checkpoint(model: TargetModel, seed: int, epochs: int, best_epoch: int = 0) -> Checkpoint:
    return Checkpoint(
        "target",
        _architecture(model, "target"),
        {k: p.data for k, p in model.params.items()},
        seed=seed,
        epochs=epochs,
        extra={"best_epoch": best_epoch},
    )


def _load_params(ckpt: Checkpoint, template: dict[str, Parameter]) -> dict[str, Parameter]:
    frozen = set(ckpt.architecture.get("frozen", []))
    mismatched = _mismatches(ckpt.tensor_shapes(), {k: p.data.shape for k, p in template.items()})
    if mismatched:
        raise ConfigError("checkpoint tensors do not match architecture: " + "; ".join(mismatched))
    return {
        k: Parameter(k, ckpt.tensors[k].astype(np.float64), frozen=k in frozen) for k in template
    }


def _mismatches(have: dict, want: dict) -> list[str]:
    out = []
    for k in sorted(set(have) | set(want)):
        if k not in have:
            out.append(f"{k}: missing (expected {want[k]})")
        elif k not in want:
            out.append(f"{k}: unexpected")
        elif tuple(have[k]) != tuple(want[k]):
            out.append(f"{k}: shape {tuple(have[k])} != expected {tuple(want[k])}")
    return out


def source_from_checkpoint(ckpt: Checkpoint) -> SourceModel:
    if ckpt.model_kind != "source":
        raise ConfigError(f"expected a source checkpoint, got {ckpt.model_kind}")
    arch = ckpt.architecture
    config = BackboneConfig.from_dict(arch["backbone"])
    template = SourceModel.init(config, arch["head"], np.random.default_rng(0), arch["mlp_hidden"])
    return SourceModel(config, arch["head"], _load_params(ckpt, template.params), arch["mlp_hidden"])


def target_from_checkpoint(ckpt: Checkpoint) -> TargetModel:
    if ckpt.model_kind != "target":
        raise ConfigError(f"expected a target checkpoint, got {ckpt.model_kind}")
    arch = ckpt.architecture
    config = BackboneConfig.from_dict(arch["backbone"])
    src = SourceModel.init(config, arch["head"], np.random.default_rng(0), arch["mlp_hidden"])
    template = TargetModel.from_source(src, arch["aggregation"], arch["attention_dim"])
    params = _load_params(ckpt, template.params)
    return TargetModel(
        config, arch["head"], params, arch["aggregation"], arch["attention_dim"], arch["mlp_hidden"]
    )


def check_compatible(ckpt: Checkpoint, backbone: BackboneConfig, head: str | None = None) -> None:
    """Raise :class:`ConfigError` naming every tensor whose shape the flags disagree with."""
    head = head or ckpt.architecture.get("head", "gmp")
    mlp_hidden = ckpt.architecture.get("mlp_hidden", 128)
    template = SourceModel.init(copy.deepcopy(backbone), head, np.random.default_rng(0), mlp_hidden)
    want = {k: p.data.shape for k, p in template.params.items()}
    have = ckpt.tensor_shapes()
    if ckpt.model_kind == "target":
        have = {k: v for k, v in have.items() if k in want or k.startswith(("extractor.", "attention.", "head."))}
        want = {k: v for k, v in want.items() if not k.startswith("classifier.")}
    bad = _mismatches(have, want)
    if bad:
        raise ConfigError("incompatible checkpoint: " + "; ".join(bad))


def write_log_csv(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "split", "loss", "acc"])
        for r in rows:
            w.writerow([r["epoch"], r["split"], repr(float(r["loss"])), repr(float(r["acc"]))])


def read_log_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            {"epoch": int(r["epoch"]), "split": r["split"], "loss": float(r["loss"]), "acc": float(r["acc"])}
            for r in csv.DictReader(fh)
        ]
