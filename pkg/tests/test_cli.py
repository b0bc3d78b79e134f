import argparse
import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from seamil.checkpoint import load_checkpoint
from seamil.cli import EXIT_CODES, build_parser, main
from seamil.data import read_manifest
from seamil.imaging import read_gray
from seamil.tiling import read_tile_index

TINY = ["--widths", "4", "8", "--input-size", "16", "--se-ratio", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--slides", 6, "--seed", 7) == 0
    assert run("tile", "--manifest", root / "data" / "manifest.jsonl", "--out", root / "tiles") == 0
    return root


def test_synth_composition_and_rerun(cohort, tmp_path):
    records = read_manifest(cohort / "data" / "manifest.jsonl")
    assert len(records) == 6 and sum(r.label for r in records) == 3
    assert run("synth", "--out", tmp_path / "a", "--slides", 4, "--malignant-frac", 0.5, "--seed", 3) == 0
    assert run("synth", "--out", tmp_path / "b", "--slides", 4, "--malignant-frac", 0.5, "--seed", 3) == 0
    assert sorted(r.biopsy_label for r in read_manifest(tmp_path / "a" / "manifest.jsonl")) == ["benign"] * 2 + ["malignant"] * 2
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_synth_all_benign(tmp_path):
    assert run("synth", "--out", tmp_path, "--slides", 2, "--malignant-frac", 0) == 0
    assert all(r.biopsy_label == "benign" for r in read_manifest(tmp_path / "manifest.jsonl"))


def test_tile_index_and_counts(cohort):
    index = read_tile_index(cohort / "tiles" / "tiles.jsonl")
    per_slide = {}
    for t in index:
        per_slide[t.slide_id] = per_slide.get(t.slide_id, 0) + 1
    assert len(per_slide) == 6 and max(per_slide.values()) <= 9
    assert len(list((cohort / "tiles" / "tiles").iterdir())) == len(index)


def test_tile_impossible_threshold_warns(cohort, tmp_path, capsys):
    assert run("tile", "--manifest", cohort / "data" / "manifest.jsonl", "--out", tmp_path, "--min-tissue", 1.01) == 0
    out, err = capsys.readouterr()
    assert "kept 0" in out
    assert json.loads(err.strip().splitlines()[-1])["warning"] == "no-tiles-kept"


def test_tile_missing_image_names_slide(cohort, tmp_path, capsys):
    lines = (cohort / "data" / "manifest.jsonl").read_text().splitlines()
    rec = json.loads(lines[0])
    rec["image_path"] = "slides/nowhere.png"
    (tmp_path / "manifest.jsonl").write_text(json.dumps(rec) + "\n")
    code = run("tile", "--manifest", tmp_path / "manifest.jsonl", "--out", tmp_path / "t")
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert code == EXIT_CODES["io-error"] and err["error"] == "io-error"
    assert rec["slide_id"] in err["message"] and err["command"] == "tile"


@pytest.fixture(scope="module")
def trained(cohort):
    root = cohort
    m = root / "data" / "manifest.jsonl"
    assert run("split", "--manifest", m, "--out", root / "split.json", "--seed", 1) == 0
    assert run("train-source", "--tiles", root / "tiles", "--manifest", m, "--out", root / "src.ckpt",
               "--split", root / "split.json", "--val-fold", 0, *TINY,
               "--epochs", 2, "--lr", 0.05, "--batch-size", 16) == 0
    assert run("infer-roi", "--checkpoint", root / "src.ckpt", "--tiles", root / "tiles", "--out", root / "roi.csv") == 0
    # bags from the annotation, so an undertrained source cannot leave a slide empty
    rows = _rows(root / "roi.csv")
    for r in rows:
        r["roi"] = "1" if r["label"] == "1" else "0"
    _write_rows(root / "roi_gt.csv", rows)
    assert run("train-target", "--tiles", root / "tiles", "--manifest", m, "--source", root / "src.ckpt",
               "--roi", root / "roi_gt.csv", "--out", root / "tgt.ckpt", "--epochs", 2, "--attention-dim", 8) == 0
    assert run("infer-wsi", "--checkpoint", root / "tgt.ckpt", "--tiles", root / "tiles", "--roi", root / "roi_gt.csv",
               "--manifest", m, "--out", root / "wsi.csv", "--attention-out", root / "attn.csv") == 0
    return root


def test_training_outputs(trained):
    assert load_checkpoint(trained / "src.ckpt").model_kind == "source"
    assert load_checkpoint(trained / "tgt.ckpt").model_kind == "target"
    assert _rows(trained / "src.log.csv")[0].keys() == {"epoch", "split", "loss", "acc"}
    split = json.loads((trained / "split.json").read_text())
    assert len(split["test_patients"]) == 2 and sum(len(f) for f in split["folds"]) == 4


def test_infer_outputs(trained):
    roi = _rows(trained / "roi.csv")
    assert list(roi[0]) == ["tile_id", "slide_id", "x", "y", "size", "x_center", "y_center", "p_tumor", "roi", "label"]
    assert all(0.0 <= float(r["p_tumor"]) <= 1.0 for r in roi)
    wsi = _rows(trained / "wsi.csv")
    assert len(wsi) == 6 and all(r["prediction"] in ("0", "1") for r in wsi)
    attn = _rows(trained / "attn.csv")
    for sid in {r["slide_id"] for r in attn}:
        assert sum(float(r["attention"]) for r in attn if r["slide_id"] == sid) == pytest.approx(1.0, abs=1e-9)


def test_architecture_mismatch_is_config_error(trained, capsys):
    code = run("infer-roi", "--checkpoint", trained / "src.ckpt", "--tiles", trained / "tiles",
               "--out", trained / "x.csv", "--widths", "4", "16", "--input-size", "16", "--se-ratio", "2")
    assert code == EXIT_CODES["config-error"]
    assert json.loads(capsys.readouterr().err.strip())["error"] == "config-error"


def test_corrupt_checkpoint_exit(trained, tmp_path, capsys):
    blob = bytearray((trained / "src.ckpt").read_bytes())
    blob[-8] ^= 1
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    code = run("infer-roi", "--checkpoint", tmp_path / "bad.ckpt", "--tiles", trained / "tiles", "--out", tmp_path / "r.csv")
    assert code == EXIT_CODES["checksum"]
    assert json.loads(capsys.readouterr().err.strip())["error"] == "checksum"


def test_eval_perfect_predictions(tmp_path):
    _write_rows(tmp_path / "p.csv", [{"prob": p, "label": y} for p, y in [(0.9, 1), (0.8, 1), (0.2, 0), (0.1, 0)]])
    assert run("eval", "--predictions", tmp_path / "p.csv", "--out", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["pooled"]["ACC"] == 1.0 and report["pooled"]["AUC"] == 1.0


def test_eval_groups_and_undefined(tmp_path):
    rows = [{"score": s, "label": y, "fold": f} for s, y, f in [(0.9, 1, "a"), (0.3, 0, "a"), (0.7, 1, "b"), (0.6, 1, "b")]]
    _write_rows(tmp_path / "p.csv", rows)
    assert run("eval", "--predictions", tmp_path / "p.csv", "--group-column", "fold", "--out", tmp_path / "r.json") == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["per_group"]["b"]["SPC"] == "undefined"
    assert report["group_mean"]["ACC"] == 1.0


def test_heatmap_roi_constant(tmp_path):
    rows = [{"tile_id": i, "slide_id": "s", "x": x, "y": y, "size": 512, "x_center": x + 256, "y_center": y + 256,
             "p_tumor": 0.6, "roi": 1, "label": ""} for i, (x, y) in enumerate([(0, 0), (256, 0), (0, 256), (256, 256)])]
    _write_rows(tmp_path / "roi.csv", rows)
    assert run("heatmap", "--mode", "roi", "--input", tmp_path / "roi.csv", "--out", tmp_path / "h.png",
               "--width", 32, "--height", 24) == 0
    img = read_gray(tmp_path / "h.png")
    assert img.shape == (24, 32) and np.all(img == 153)
    assert len(_rows(tmp_path / "h.csv")) == 4


def test_heatmap_attention_and_cam(trained, tmp_path):
    sid = _rows(trained / "attn.csv")[0]["slide_id"]
    assert run("heatmap", "--mode", "attention", "--input", trained / "attn.csv", "--slide-id", sid,
               "--slide-size", 1024, 1024, "--out", tmp_path / "a.png") == 0
    assert read_gray(tmp_path / "a.png").max() == 255
    tile = next((trained / "tiles" / "tiles").iterdir())
    assert run("heatmap", "--mode", "cam", "--checkpoint", trained / "src.ckpt", "--tile", tile,
               "--out", tmp_path / "c.png") == 0
    assert read_gray(tmp_path / "c.png").shape == (224, 224)


def test_heatmap_attention_needs_slide_choice(trained, tmp_path, capsys):
    code = run("heatmap", "--mode", "attention", "--input", trained / "attn.csv", "--out", tmp_path / "a.png")
    assert code == EXIT_CODES["config-error"]


def test_config_file_with_flag_override(tmp_path):
    (tmp_path / "cfg.json").write_text(json.dumps({"slides": 2, "malignant_frac": 1.0}))
    assert run("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "a") == 0
    assert [r.label for r in read_manifest(tmp_path / "a" / "manifest.jsonl")] == [1, 1]
    assert run("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "b", "--malignant-frac", 0) == 0
    assert [r.label for r in read_manifest(tmp_path / "b" / "manifest.jsonl")] == [0, 0]


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"slides": 2, "colour": "red"}))
    assert run("synth", "--config", tmp_path / "cfg.json", "--out", tmp_path / "a") == EXIT_CODES["config-error"]


def _subparsers():
    parser = build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


@pytest.mark.parametrize("name", sorted(_subparsers()))
def test_help_documents_every_flag_and_default(name):
    sub = _subparsers()[name]
    text = " ".join(sub.format_help().split())
    for action in sub._actions:
        if action.dest == "help":
            continue
        assert any(opt in text for opt in action.option_strings), (name, action.dest)
        if action.default not in (None, False, argparse.SUPPRESS) and action.help:
            assert "default:" in text


def test_help_lists_each_default_value():
    text = " ".join(_subparsers()["tile"].format_help().split())
    for fragment in ("(default: 512)", "(default: 0.5)", "(default: 0.2)"):
        assert fragment in text


def test_module_entry_point_exit_codes(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "seamil", "synth", "--help"], capture_output=True, text=True)
    assert ok.returncode == 0 and "--malignant-frac" in ok.stdout
    bad = subprocess.run([sys.executable, "-m", "seamil", "eval", "--predictions", str(tmp_path / "none.csv"),
                          "--out", str(tmp_path / "r.json")], capture_output=True, text=True)
    assert bad.returncode != 0
    assert json.loads(bad.stderr.strip().splitlines()[-1])["command"] == "eval"


def test_missing_subcommand_is_usage_error():
    assert main([]) == EXIT_CODES["usage-error"]
