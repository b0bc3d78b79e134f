"""Command-line entry point: ``python -m seamil <subcommand> ...``.

Stages hand off through files (manifest JSONL, tile index JSONL, CSV,
checkpoints, PNG), so every subcommand can be rerun on its own.  Failures
print one JSON line ``{"error": code, "message": ..., "command": ...}`` on
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ContractError, Tensor
from .backbone import BackboneConfig, ConfigError
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    FoldSplit,
    build_bag,
    generate_synthetic_cohort,
    patient_level_split,
    read_manifest,
    write_manifest,
)
from .evaluation import UNDEFINED, metric_report
from .heads import NON_TUMOR, TUMOR, compute_cam
from .heatmaps import (
    attention_heatmap,
    normalize_attention,
    probability_heatmap,
    write_heatmap_csv,
    write_heatmap_png,
)
from .imaging import read_gray, read_rgb, tile_to_input, write_gray, write_rgb
from .mil import MAX_BAG_SIZE, bag_decision
from .pipeline import select_roi
from .tiling import (
    SlideRaster,
    TileRecord,
    read_tile_index,
    tile_filename,
    tile_slide,
    write_tile_index,
)
from .training import (
    SourceTrainConfig,
    TargetTrainConfig,
    check_compatible,
    read_log_csv,
    source_from_checkpoint,
    target_from_checkpoint,
    train_source,
    train_target,
    write_log_csv,
)

__all__ = ["main", "build_parser", "EXIT_CODES"]

log = logging.getLogger("seamil")

EXIT_CODES = {
    "usage-error": 2,
    "config-error": 3,
    "io-error": 4,
    "bad-magic": 5,
    "unsupported-version": 5,
    "truncated": 5,
    "checksum": 5,
    "checkpoint": 5,
    "contract-error": 6,
    "value-error": 6,
    "validation-error": 7,
}


class ValidationError(Exception):
    """An output file did not read back as written."""


# ---------------------------------------------------------------------------
# shared helpers


def _cpu_count() -> int:
    return os.cpu_count() or 1


def _pmap(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _check_rows(path: Path, n: int) -> None:
    if len(_read_csv(path)) != n:
        raise ValidationError(f"{path} does not hold the {n} rows written")


def _backbone_from_args(args, required: bool) -> BackboneConfig | None:
    given = any(
        getattr(args, k) is not None
        for k in ("widths", "convs_per_block", "frozen_blocks", "input_size", "se_ratio", "seanet")
    )
    if not given and not required:
        return None
    default = BackboneConfig()
    widths = args.widths if args.widths is not None else default.block_channel_widths
    size = args.input_size if args.input_size is not None else default.input_size[0]
    return BackboneConfig(
        block_channel_widths=widths,
        convs_per_block=args.convs_per_block if args.convs_per_block is not None else default.convs_per_block,
        frozen_blocks=args.frozen_blocks if args.frozen_blocks is not None else default.frozen_blocks,
        input_size=(size, size, 3),
        se_reduction_ratio=args.se_ratio if args.se_ratio is not None else default.se_reduction_ratio,
        seanet=args.seanet if args.seanet is not None else default.seanet,
    )


def _split_sets(args, patients_of: dict[str, str]) -> tuple[set[str] | None, set[str] | None]:
    """(train slide ids, val slide ids); ``None`` train means every slide."""
    if not args.split:
        return None, None
    split = FoldSplit.from_json(Path(args.split).read_text(encoding="utf-8"))
    if args.val_fold is None:
        train_p, val_p = set(split.train_patients), set()
    else:
        tr, va = split.fold(args.val_fold)
        train_p, val_p = set(tr), set(va)
    train = {s for s, p in patients_of.items() if p in train_p}
    val = {s for s, p in patients_of.items() if p in val_p}
    return train, val


class _TileStore:
    """Tile index plus lazily loaded tile PNGs of one ``tile`` output directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        index = self.root / "tiles.jsonl"
        if not index.exists():
            raise FileNotFoundError(f"tile index {index} not found")
        self.records = read_tile_index(index)
        self.by_id = {r.tile_id: r for r in self.records}

    def by_slide(self) -> dict[str, list[TileRecord]]:
        out: dict[str, list[TileRecord]] = {}
        for r in self.records:
            out.setdefault(r.slide_id, []).append(r)
        return out

    def load(self, record: TileRecord, size: int) -> np.ndarray:
        return tile_to_input(read_rgb(self.root / "tiles" / tile_filename(record)), size)

    def load_many(self, records: Sequence[TileRecord], size: int, threads: int) -> np.ndarray:
        if not records:
            return np.zeros((0, size, size, 3))
        return np.stack(_pmap(lambda r: self.load(r, size), list(records), threads))


def _tile_label(r: TileRecord) -> str:
    return {"tumor": "1", "non_tumor": "0"}.get(r.region_label, "")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = Path(args.out)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    cohort = generate_synthetic_cohort(
        args.slides, args.seed, args.malignant_frac, (args.size, args.size)
    )
    records = []
    for slide, annotation, record in cohort:
        write_rgb(out / record.image_path, slide.pixels)
        write_gray(out / record.annotation_path, annotation)
        records.append(record)
    write_manifest(out / "manifest.jsonl", records)
    if len(read_manifest(out / "manifest.jsonl")) != len(records):
        raise ValidationError("manifest did not read back")
    n_mal = sum(r.label for r in records)
    print(f"synth: {len(records)} slides ({n_mal} malignant, {len(records) - n_mal} benign) -> {out}")


def cmd_tile(args) -> None:
    manifest = Path(args.manifest)
    base = manifest.parent
    records = read_manifest(manifest)
    out = Path(args.out)
    (out / "tiles").mkdir(parents=True, exist_ok=True)

    def one(rec):
        path = base / rec.image_path
        if not path.exists():
            raise FileNotFoundError(f"slide {rec.slide_id}: image {path} not found")
        slide = SlideRaster(rec.slide_id, read_rgb(path))
        annotation = None
        if rec.annotation_path:
            apath = base / rec.annotation_path
            if not apath.exists():
                raise FileNotFoundError(f"slide {rec.slide_id}: annotation {apath} not found")
            annotation = read_gray(apath)
        kept, excluded = tile_slide(slide, annotation, args.patch, args.overlap, args.min_tissue)
        for t in kept:
            write_rgb(out / "tiles" / tile_filename(t), slide.pixels[t.y : t.y + t.size, t.x : t.x + t.size])
        return kept, excluded

    results = _pmap(one, records, args.threads)
    tiles = [t for kept, _ in results for t in kept]
    excluded = sum(e for _, e in results)
    write_tile_index(out / "tiles.jsonl", tiles)
    if read_tile_index(out / "tiles.jsonl") != tiles:
        raise ValidationError("tile index did not read back losslessly")
    print(f"tile: {len(records)} slides, kept {len(tiles)}, excluded {excluded}")
    if not tiles:
        print(
            json.dumps({"warning": "no-tiles-kept", "message": f"min_tissue={args.min_tissue} kept no tiles"}),
            file=sys.stderr,
        )


def cmd_split(args) -> None:
    records = read_manifest(args.manifest)
    split = patient_level_split(records, args.seed, args.folds, args.test_fraction)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(split.to_json(), encoding="utf-8")
    if FoldSplit.from_json(out.read_text(encoding="utf-8")) != split:
        raise ValidationError("split did not read back")
    print(f"split: {len(split.test_patients)} test patients, {len(split.folds)} folds -> {out}")


def _save_run(ckpt, history, args) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, out)
    if load_checkpoint(out) != ckpt:
        raise ValidationError("checkpoint did not read back bit-exactly")
    log_path = Path(args.log) if args.log else out.with_suffix(".log.csv")
    write_log_csv(log_path, history)
    if len(read_log_csv(log_path)) != len(history):
        raise ValidationError("training log did not read back")


def cmd_train_source(args) -> None:
    store = _TileStore(args.tiles)
    patients = {r.slide_id: r.patient_id for r in read_manifest(args.manifest)}
    train_ids, val_ids = _split_sets(args, patients)
    backbone = _backbone_from_args(args, required=True)
    size = backbone.input_size[0]
    labelled = [r for r in store.records if r.region_label in ("tumor", "non_tumor")]
    tr = [r for r in labelled if train_ids is None or r.slide_id in train_ids]
    va = [r for r in labelled if val_ids and r.slide_id in val_ids]
    if not tr:
        raise ContractError("no labelled training tiles")
    cfg = SourceTrainConfig(
        backbone=backbone, head=args.head, epochs=args.epochs, lr=args.lr,
        batch_size=args.batch_size, momentum=args.momentum, seed=args.seed,
        instance_dropout=not args.no_instance_dropout, mlp_hidden=args.mlp_hidden,
    )
    x = store.load_many(tr, size, args.threads)
    y = np.array([int(r.region_label == "tumor") for r in tr])
    xv = yv = None
    if va:
        xv = store.load_many(va, size, args.threads)
        yv = np.array([int(r.region_label == "tumor") for r in va])
    res = train_source(x, y, cfg, xv, yv)
    _save_run(res.checkpoint, res.log, args)
    print(f"train-source: {len(tr)} train / {len(va)} val tiles, best epoch {res.best_epoch} -> {args.out}")


def _roi_tiles(store: _TileStore, roi_csv: str | None, source, size: int, threads: int) -> dict[str, list[TileRecord]]:
    """Per-slide ROI tiles, from an ``infer-roi`` CSV or by running ``source``."""
    groups = store.by_slide()
    if roi_csv:
        chosen = {row["tile_id"] for row in _read_csv(Path(roi_csv)) if row["roi"] == "1"}
        return {s: [t for t in ts if t.tile_id in chosen] for s, ts in groups.items()}
    out = {}
    for sid, ts in groups.items():
        probs = source.predict(store.load_many(ts, size, threads))[:, TUMOR]
        out[sid] = [ts[i] for i in select_roi(ts, probs)]
    return out


def _bags(store, roi, records, ids, size, cap, seed, threads) -> list:
    bags = []
    for rec in records:
        if ids is not None and rec.slide_id not in ids:
            continue
        tiles = roi.get(rec.slide_id, [])
        bags.append(
            build_bag(
                rec.slide_id, tiles, rec.label,
                lambda t: store.load(t, size), cap, seed,
            )
        )
    return bags


def cmd_train_target(args) -> None:
    store = _TileStore(args.tiles)
    records = read_manifest(args.manifest)
    ckpt = load_checkpoint(args.source)
    expected = _backbone_from_args(args, required=False)
    if expected is not None:
        check_compatible(ckpt, expected)
    source = source_from_checkpoint(ckpt)
    size = source.config.input_size[0]
    train_ids, val_ids = _split_sets(args, {r.slide_id: r.patient_id for r in records})
    roi = _roi_tiles(store, args.roi, source, size, args.threads)
    bags = _bags(store, roi, records, train_ids, size, args.bag_cap, args.seed, args.threads)
    val = _bags(store, roi, records, val_ids, size, args.bag_cap, args.seed, args.threads) if val_ids else []
    cfg = TargetTrainConfig(
        epochs=args.epochs, lr=args.lr, bag_cap=args.bag_cap, aggregation=args.aggregation,
        attention_dim=args.attention_dim, seed=args.seed, freeze_backbone=args.freeze_backbone,
        momentum=args.momentum,
    )
    res = train_target(bags, source, cfg, val)
    _save_run(res.checkpoint, res.log, args)
    print(f"train-target: {len(bags)} train / {len(val)} val bags, best epoch {res.best_epoch} -> {args.out}")


def cmd_infer_roi(args) -> None:
    store = _TileStore(args.tiles)
    ckpt = load_checkpoint(args.checkpoint)
    expected = _backbone_from_args(args, required=False)
    if expected is not None:
        check_compatible(ckpt, expected)
    model = source_from_checkpoint(ckpt)
    size = model.config.input_size[0]
    rows = []
    for sid, tiles in store.by_slide().items():
        probs = model.predict(store.load_many(tiles, size, args.threads))
        roi = set(select_roi(tiles, probs[:, TUMOR]))
        for i, t in enumerate(tiles):
            xc, yc = t.center
            rows.append([t.tile_id, sid, t.x, t.y, t.size, xc, yc, float(probs[i, TUMOR]),
                         int(i in roi), _tile_label(t)])
    out = Path(args.out)
    _write_csv(out, ["tile_id", "slide_id", "x", "y", "size", "x_center", "y_center", "p_tumor", "roi", "label"], rows)
    _check_rows(out, len(rows))
    print(f"infer-roi: {len(rows)} tiles -> {out}")


def cmd_infer_wsi(args) -> None:
    store = _TileStore(args.tiles)
    ckpt = load_checkpoint(args.checkpoint)
    expected = _backbone_from_args(args, required=False)
    if expected is not None:
        check_compatible(ckpt, expected)
    model = target_from_checkpoint(ckpt)
    size = model.config.input_size[0]
    labels = {}
    if args.manifest:
        labels = {r.slide_id: r.label for r in read_manifest(args.manifest)}
    roi = _roi_tiles(store, args.roi, None, size, args.threads) if args.roi else None
    if roi is None:
        raise ConfigError("infer-wsi needs --roi (the target model has no patch classifier)")
    slide_ids = args.slide or sorted(roi)
    rows, attn_rows = [], []
    for sid in slide_ids:
        if sid not in roi:
            raise ContractError(f"slide {sid} has no tiles in {args.tiles}")
        bag = build_bag(sid, roi[sid], labels.get(sid, 0), lambda t: store.load(t, size), args.bag_cap, args.seed)
        prob, attn = model.forward(bag)
        p = float(prob.data.reshape(-1)[0])
        label = labels.get(sid, "")
        rows.append([sid, len(bag), p, bag_decision(p), label])
        weights = attn.data.reshape(-1) if attn is not None else np.full(len(bag), 1.0 / len(bag))
        for tid, a in zip(bag.instance_tile_ids, weights):
            t = store.by_id[tid]
            xc, yc = t.center
            attn_rows.append([sid, tid, t.x, t.y, t.size, xc, yc, float(a)])
    out = Path(args.out)
    _write_csv(out, ["slide_id", "n_instances", "prob", "prediction", "label"], rows)
    _check_rows(out, len(rows))
    if args.attention_out:
        apath = Path(args.attention_out)
        _write_csv(apath, ["slide_id", "tile_id", "x", "y", "size", "x_center", "y_center", "attention"], attn_rows)
        _check_rows(apath, len(attn_rows))
    for sid, _, p, pred, _ in rows:
        print(f"infer-wsi: {sid} prob={p:.6f} prediction={'malignant' if pred else 'benign'}")


def _score_column(rows: list[dict], requested: str | None) -> str:
    if requested:
        return requested
    for c in ("prob", "p_tumor", "score"):
        if rows and c in rows[0]:
            return c
    raise ConfigError("cannot tell which column holds scores; pass --score-column")


def cmd_eval(args) -> None:
    rows = _read_csv(Path(args.predictions))
    col = _score_column(rows, args.score_column)
    rows = [r for r in rows if r.get(args.label_column, "") not in ("", None)]
    if not rows:
        raise ContractError("no labelled predictions to evaluate")
    scores = [float(r[col]) for r in rows]
    labels = [int(r[args.label_column]) for r in rows]
    report = {"pooled": metric_report(scores, labels, args.threshold).to_dict(), "n": len(rows)}
    if args.group_column:
        groups: dict[str, list[int]] = {}
        for i, r in enumerate(rows):
            groups.setdefault(r[args.group_column], []).append(i)
        per = {g: metric_report([scores[i] for i in idx], [labels[i] for i in idx], args.threshold).to_dict()
               for g, idx in sorted(groups.items())}
        mean, std = {}, {}
        for k in next(iter(per.values())):
            vals = [v[k] for v in per.values() if v[k] != UNDEFINED]
            mean[k] = float(np.mean(vals)) if vals else UNDEFINED
            std[k] = float(np.std(vals)) if vals else UNDEFINED
        report.update({"per_group": per, "group_mean": mean, "group_std": std})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    json.loads(out.read_text(encoding="utf-8"))
    pooled = report["pooled"]
    print(f"eval: n={len(rows)} ACC={pooled['ACC']} AUC={pooled['AUC']} -> {out}")


def _slide_rows(rows: list[dict], slide_id: str | None) -> list[dict]:
    ids = sorted({r["slide_id"] for r in rows})
    if slide_id is None:
        if len(ids) != 1:
            raise ConfigError(f"input holds {len(ids)} slides; pick one with --slide-id")
        slide_id = ids[0]
    sel = [r for r in rows if r["slide_id"] == slide_id]
    if not sel:
        raise ContractError(f"no rows for slide {slide_id}")
    return sel


def _slide_dims(rows: list[dict], args) -> tuple[int, int]:
    if args.slide_size:
        return args.slide_size[1], args.slide_size[0]
    w = max(int(r["x"]) + int(r["size"]) for r in rows)
    h = max(int(r["y"]) + int(r["size"]) for r in rows)
    return h, w


def cmd_heatmap(args) -> None:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_out = Path(args.csv_out) if args.csv_out else out.with_suffix(".csv")
    if args.mode == "cam":
        if not args.checkpoint or not args.tile:
            raise ConfigError("--mode cam needs --checkpoint and --tile")
        model = source_from_checkpoint(load_checkpoint(args.checkpoint))
        x = tile_to_input(read_rgb(args.tile), model.config.input_size[0])[None]
        a = model.refine(Tensor(x)).data[0]
        cls = TUMOR if args.cam_class == "tumor" else NON_TUMOR
        cam = compute_cam(a, model.params, cls, model.head, (args.height, args.width))
        write_heatmap_png(out, cam)
        ys, xs = np.mgrid[0 : cam.shape[0], 0 : cam.shape[1]]
        rows = list(zip((xs + 0.5).ravel(), (ys + 0.5).ravel(), cam.ravel()))
    else:
        if not args.input:
            raise ConfigError(f"--mode {args.mode} needs --input")
        rows_in = _slide_rows(_read_csv(Path(args.input)), args.slide_id)
        dims = _slide_dims(rows_in, args)
        out_dims = (args.height, args.width)
        if args.mode == "roi":
            tp = [(float(r["x_center"]), float(r["y_center"]), float(r["p_tumor"])) for r in rows_in]
            raster = probability_heatmap(tp, out_dims, dims)
            rows = tp
        else:
            a = [float(r["attention"]) for r in rows_in]
            coords = [(int(r["x"]), int(r["y"])) for r in rows_in]
            raster = attention_heatmap(a, coords, out_dims, dims, int(rows_in[0]["size"]))
            rows = list(zip([float(r["x_center"]) for r in rows_in],
                            [float(r["y_center"]) for r in rows_in], normalize_attention(a)))
        write_heatmap_png(out, raster)
    write_heatmap_csv(csv_out, rows)
    _check_rows(csv_out, len(rows))
    print(f"heatmap: mode={args.mode} -> {out}, {csv_out}")


# ---------------------------------------------------------------------------
# parser


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _add_common(p: argparse.ArgumentParser, seed: bool = True, threads: int | None = None) -> None:
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    if seed:
        p.add_argument("--seed", type=int, default=0, help="run seed; every random stream derives from it")
    p.add_argument("--threads", type=int, default=threads if threads is not None else _cpu_count(),
                   help="worker threads for tile loading/tiling")
    p.add_argument("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")


def _add_architecture(p: argparse.ArgumentParser, training: bool) -> None:
    g = p.add_argument_group(
        "architecture",
        "backbone shape" + ("" if training else "; when given, it must match the checkpoint"),
    )
    d = BackboneConfig()
    g.add_argument("--widths", type=int, nargs="+", default=d.block_channel_widths if training else None,
                   help="output channels of each conv block")
    g.add_argument("--convs-per-block", type=int, default=d.convs_per_block if training else None,
                   help="3x3 convs per block")
    g.add_argument("--frozen-blocks", type=int, default=d.frozen_blocks if training else None,
                   help="leading blocks excluded from updates")
    g.add_argument("--input-size", type=int, default=d.input_size[0] if training else None,
                   help="square network input side; tiles are resized to it")
    g.add_argument("--se-ratio", type=int, default=d.se_reduction_ratio if training else None,
                   help="SE reduction ratio r")
    g.add_argument("--seanet", dest="seanet", action="store_true",
                   default=d.seanet if training else None, help="enable the attention refinement module")
    g.add_argument("--no-seanet", dest="seanet", action="store_false", help="disable the attention module")


def _add_split(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", help="split JSON from the split subcommand; omitted = train on every slide")
    p.add_argument("--val-fold", type=int, default=None,
                   help="validate on this fold of --split and train on the others")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seamil", description=__doc__, formatter_class=_Formatter
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("synth", help="write a synthetic cohort", formatter_class=_Formatter)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--slides", type=int, default=4, help="number of slides (one patient each)")
    p.add_argument("--malignant-frac", type=float, default=0.5, help="share of malignant slides")
    p.add_argument("--size", type=int, default=1024, help="slide side in pixels (>= 1024)")
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("tile", help="mask tissue and cut overlapping tiles", formatter_class=_Formatter)
    p.add_argument("--manifest", required=True, help="manifest.jsonl; paths resolve against its folder")
    p.add_argument("--out", required=True, help="output directory for tiles/ and tiles.jsonl")
    p.add_argument("--patch", type=int, default=512, help="tile side in pixels")
    p.add_argument("--overlap", type=float, default=0.5, help="fractional overlap between neighbours")
    p.add_argument("--min-tissue", type=float, default=0.20, help="minimum tissue fraction to keep a tile")
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("split", help="patient-level test split and CV folds", formatter_class=_Formatter)
    p.add_argument("--manifest", required=True, help="manifest.jsonl")
    p.add_argument("--out", required=True, help="split JSON path")
    p.add_argument("--folds", type=int, default=4, help="cross-validation folds")
    p.add_argument("--test-fraction", type=float, default=0.3, help="share of patients held out for test")
    _add_common(p, threads=1)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-source", help="train the patch (ROI) classifier", formatter_class=_Formatter)
    p.add_argument("--tiles", required=True, help="output directory of the tile subcommand")
    p.add_argument("--manifest", required=True, help="manifest.jsonl (for patient ids)")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    _add_split(p)
    _add_architecture(p, training=True)
    p.add_argument("--head", choices=("gap", "gmp", "mlp"), default="gmp", help="projection head")
    p.add_argument("--mlp-hidden", type=int, default=128, help="width of the mlp head")
    p.add_argument("--epochs", type=int, default=120, help="training epochs")
    p.add_argument("--lr", type=float, default=0.001, help="SGD learning rate")
    p.add_argument("--batch-size", type=int, default=64, help="tiles per SGD step")
    p.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (0 = plain SGD)")
    p.add_argument("--no-instance-dropout", action="store_true", default=False,
                   help="keep every non-tumor tile each epoch")
    _add_common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("train-target", help="train the bag (biopsy) classifier", formatter_class=_Formatter)
    p.add_argument("--tiles", required=True, help="output directory of the tile subcommand")
    p.add_argument("--manifest", required=True, help="manifest.jsonl (labels, patient ids)")
    p.add_argument("--source", required=True, help="source checkpoint that initialises the backbone")
    p.add_argument("--roi", help="infer-roi CSV; omitted = run the source model on every tile")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    _add_split(p)
    _add_architecture(p, training=False)
    p.add_argument("--aggregation", choices=("bgas", "bgap", "bgmp"), default="bgas", help="bag pooling")
    p.add_argument("--attention-dim", type=int, default=64, help="hidden width L of the attention scorer")
    p.add_argument("--bag-cap", type=int, default=MAX_BAG_SIZE, help="maximum instances per bag")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--lr", type=float, default=0.001, help="SGD learning rate")
    p.add_argument("--momentum", type=float, default=0.0, help="SGD momentum (0 = plain SGD)")
    p.add_argument("--freeze-backbone", action="store_true", default=False,
                   help="train only the aggregation and bag classifier")
    _add_common(p)
    p.set_defaults(func=cmd_train_target)

    p = sub.add_parser("infer-roi", help="per-tile tumor probabilities", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True, help="source checkpoint")
    p.add_argument("--tiles", required=True, help="output directory of the tile subcommand")
    p.add_argument("--out", required=True, help="ROI CSV path")
    _add_architecture(p, training=False)
    _add_common(p, seed=False)
    p.set_defaults(func=cmd_infer_roi)

    p = sub.add_parser("infer-wsi", help="per-slide malignancy probabilities", formatter_class=_Formatter)
    p.add_argument("--checkpoint", required=True, help="target checkpoint")
    p.add_argument("--tiles", required=True, help="output directory of the tile subcommand")
    p.add_argument("--roi", required=True, help="infer-roi CSV selecting each slide's bag")
    p.add_argument("--manifest", help="manifest.jsonl; adds a label column")
    p.add_argument("--slide", nargs="+", help="slide ids to score (default: all)")
    p.add_argument("--out", required=True, help="bag prediction CSV path")
    p.add_argument("--attention-out", help="per-instance attention CSV path")
    p.add_argument("--bag-cap", type=int, default=MAX_BAG_SIZE, help="maximum instances per bag")
    _add_architecture(p, training=False)
    _add_common(p)
    p.set_defaults(func=cmd_infer_wsi)

    p = sub.add_parser("eval", help="metric report from a predictions CSV", formatter_class=_Formatter)
    p.add_argument("--predictions", required=True, help="CSV from infer-roi or infer-wsi (or any with scores+labels)")
    p.add_argument("--score-column", help="score column (default: prob, p_tumor or score)")
    p.add_argument("--label-column", default="label", help="0/1 label column; blank rows are skipped")
    p.add_argument("--group-column", help="also report per-group metrics and their mean/std (e.g. a fold column)")
    p.add_argument("--threshold", type=float, default=0.5, help="positive when score >= threshold")
    p.add_argument("--out", required=True, help="report JSON path")
    _add_common(p, seed=False, threads=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="ROI, attention or CAM heatmap", formatter_class=_Formatter)
    p.add_argument("--mode", choices=("roi", "attention", "cam"), default="roi", help="what to draw")
    p.add_argument("--input", help="infer-roi CSV (roi) or infer-wsi attention CSV (attention)")
    p.add_argument("--slide-id", help="slide to draw when the input holds several")
    p.add_argument("--slide-size", type=int, nargs=2, metavar=("W", "H"),
                   help="slide width and height (default: extent of its tiles)")
    p.add_argument("--checkpoint", help="source checkpoint (cam)")
    p.add_argument("--tile", help="tile PNG (cam)")
    p.add_argument("--cam-class", choices=("tumor", "non_tumor"), default="tumor", help="class to explain (cam)")
    p.add_argument("--width", type=int, default=224, help="output raster width")
    p.add_argument("--height", type=int, default=224, help="output raster height")
    p.add_argument("--out", required=True, help="8-bit grayscale PNG path")
    p.add_argument("--csv-out", help="full-precision CSV path (default: <out>.csv)")
    _add_common(p, seed=False, threads=1)
    p.set_defaults(func=cmd_heatmap)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    values = json.loads(Path(args.config).read_text(encoding="utf-8"))
    if not isinstance(values, dict):
        raise ConfigError("--config must hold a JSON object")
    sub = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    ).choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(k.replace("-", "_") for k in values if k.replace("-", "_") not in known)
    if unknown:
        raise ConfigError(f"unknown config keys for {args.command}: {unknown}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
    return parser.parse_args(argv)


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, CheckpointError):
        return exc.code
    if isinstance(exc, ConfigError):
        return "config-error"
    if isinstance(exc, ValidationError):
        return "validation-error"
    if isinstance(exc, OSError):
        return "io-error"
    if isinstance(exc, ContractError):
        return "contract-error"
    return "value-error"


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command = argv[0] if argv else None
    try:
        args = _apply_config(parser, argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING,
            format="%(levelname)s %(name)s: %(message)s",
        )
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CheckpointError, ConfigError, ValidationError, OSError, ContractError, ValueError, KeyError) as exc:
        code = _error_code(exc)
        print(json.dumps({"error": code, "message": str(exc), "command": command}), file=sys.stderr)
        return EXIT_CODES[code]
    return 0


if __name__ == "__main__":
    sys.exit(main())
