"""
Training the patch classifier and looking at its CAM
=====================================================

A small VGG-style extractor with the SE attention module and a GMP head
learns tumor vs non-tumor tiles from eight synthetic slides.  The class
activation map of one tumor tile is written to ``demo_out/cam.png``.
"""

from pathlib import Path

import numpy as np

from seamil.autodiff import Tensor
from seamil.backbone import BackboneConfig
from seamil.checkpoint import save_checkpoint
from seamil.data import generate_synthetic_cohort, patient_level_split
from seamil.heads import TUMOR, compute_cam
from seamil.heatmaps import write_heatmap_png
from seamil.pipeline import labelled_patches, tile_cohort
from seamil.training import SourceTrainConfig, train_source

out = Path("demo_out")
out.mkdir(exist_ok=True)
size = 64

cohort = generate_synthetic_cohort(8, seed=1, size=(1536, 1536))
tiled = tile_cohort(cohort, size)
split = patient_level_split([c[2] for c in cohort], seed=1, n_folds=2)
x, y = labelled_patches(tiled, split.train_patients)
xv, yv = labelled_patches(tiled, split.test_patients)
print(f"{len(x)} train tiles ({y.mean():.0%} tumor), {len(xv)} validation tiles")

cfg = SourceTrainConfig(
    backbone=BackboneConfig([8, 16, 32], input_size=(size, size, 3)),
    epochs=15, lr=0.01, batch_size=16, momentum=0.9, seed=0,
)
result = train_source(x, y, cfg, xv, yv)
for row in result.log:
    if row["epoch"] % 5 == 0:
        print(row)
print("kept epoch", result.best_epoch)
save_checkpoint(result.checkpoint, out / "source.ckpt")

model = result.model
i = int(np.argmax(yv))
refined = model.refine(Tensor(xv[i : i + 1])).data[0]
cam = compute_cam(refined, model.params, TUMOR, model.head, (224, 224))
write_heatmap_png(out / "cam.png", cam)
print("p(tumor) of the CAM tile", model.predict(xv[i : i + 1])[0, TUMOR])
