"""
Bag-level malignancy with attention pooling
===========================================

Needs ``demo_out/source.ckpt`` from 03_source_model.py.  The source model
picks each slide's ROI tiles, the bags train the attention MIL model and
the attention of one malignant slide is drawn as a heatmap.
"""

from pathlib import Path

import numpy as np

from seamil.checkpoint import load_checkpoint
from seamil.data import generate_synthetic_cohort
from seamil.heatmaps import attention_heatmap, write_heatmap_png
from seamil.pipeline import slide_bag, tile_cohort
from seamil.training import TargetTrainConfig, source_from_checkpoint, train_target

out = Path("demo_out")
source = source_from_checkpoint(load_checkpoint(out / "source.ckpt"))
size = source.config.input_size[0]

cohort = generate_synthetic_cohort(30, seed=2, return_layout=True)
tiled = tile_cohort(cohort, size)
bags, tile_lists = [], []
for ts in tiled:
    bag, tiles = slide_bag(ts, source)
    bags.append(bag)
    tile_lists.append(tiles)
print("bag sizes", [len(b) for b in bags])

cfg = TargetTrainConfig(epochs=50, momentum=0.9, aggregation="bgas", seed=0)
result = train_target(bags[:20], source, cfg, bags[20:])
print("last epoch", result.log[-2:], "kept epoch", result.best_epoch)

k = next(i for i in range(20, 30) if bags[i].label == 1)
prob, attention = result.model.forward(bags[k])
a = attention.data.reshape(-1)
layout = cohort[k][3]
for tile, weight in zip(tile_lists[k], a):
    mark = "speckle" if layout.has_speckle(tile.x, tile.y, tile.size) else ""
    print(f"{tile.tile_id:24s} a={weight:.3f} {mark}")
print("slide", bags[k].slide_id, "p(malignant)", prob.item())

raster = attention_heatmap(a, [(t.x, t.y) for t in tile_lists[k]], (256, 256), (1024, 1024))
write_heatmap_png(out / "attention.png", raster)
