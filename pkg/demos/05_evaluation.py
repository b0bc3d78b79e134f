"""
Metrics, ROC and a probability heatmap
======================================

Confusion-matrix metrics keep undefined ratios explicit, AUC is the
trapezoidal ROC area, and per-tile probabilities are interpolated to a
slide raster.
"""

from pathlib import Path

import numpy as np

from seamil.evaluation import metric_report, roc_curve
from seamil.heatmaps import probability_heatmap, write_heatmap_csv, write_heatmap_png

out = Path("demo_out")
out.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
labels = rng.integers(0, 2, 40)
scores = np.clip(labels * 0.35 + rng.normal(0.35, 0.2, 40), 0, 1)
print(metric_report(scores, labels).to_json())

fpr, tpr, thresholds = roc_curve(scores, labels)
print("ROC points", len(fpr))

# only positives: specificity and AUC are undefined
print(metric_report([0.9, 0.2, 0.7], [1, 1, 1]).undefined())

# a 3x3 grid of tile centres on a 1024px slide
tiles = [(256 + 256 * j, 256 + 256 * i, p) for i in range(3) for j in range(3)
         for p in [float(np.hypot(i - 2, j - 2) < 1.5)]]
raster = probability_heatmap(tiles, (128, 128), (1024, 1024))
write_heatmap_png(out / "probability.png", raster)
write_heatmap_csv(out / "probability.csv", tiles)
print("raster range", raster.values.min(), raster.values.max())
