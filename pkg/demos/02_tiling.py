"""
From a synthetic slide to labelled tiles
========================================

Otsu on the magenta channel gives the tissue mask.  A 50%-overlap grid of
512px tiles keeps those with at least 20% tissue, and each kept tile takes
its label from the annotation.  Images go to ``demo_out/``.
"""

from pathlib import Path

import numpy as np

from seamil.data import generate_synthetic_slide
from seamil.imaging import write_gray, write_rgb
from seamil.tiling import histogram256, magenta_channel, otsu_threshold, tile_slide, tissue_mask

out = Path("demo_out")
out.mkdir(exist_ok=True)

slide, annotation, record, layout = generate_synthetic_slide(11, label="malignant", return_layout=True)
print(record)

t = otsu_threshold(histogram256(magenta_channel(slide.pixels)))
mask = tissue_mask(slide.pixels)
print("otsu threshold", t, "tissue share", mask.mask.mean().round(3))

tiles, excluded = tile_slide(slide, annotation)
for tile in tiles:
    flag = "speckle" if layout.has_speckle(tile.x, tile.y, tile.size) else ""
    print(f"{tile.tile_id:24s} tissue={tile.tissue_fraction:.2f} {tile.region_label:10s} {flag}")
print("excluded", excluded)

overlay = slide.pixels.copy()
for tile in tiles:
    colour = (200, 0, 0) if tile.region_label == "tumor" else (0, 0, 200)
    overlay[tile.y : tile.y + 4, tile.x : tile.x + tile.size] = colour
    overlay[tile.y : tile.y + tile.size, tile.x : tile.x + 4] = colour
write_rgb(out / "slide.png", slide.pixels)
write_gray(out / "tissue_mask.png", np.where(mask.mask, 255, 0).astype(np.uint8))
write_rgb(out / "tiles_overlay.png", overlay)
