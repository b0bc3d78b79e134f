"""Attention-refined CNN patch classifier and attention-MIL slide classifier in numpy.

Modules, roughly in pipeline order:

- ``autodiff``: float64 tensors, reverse-mode tape, layers, SGD
- ``tiling``: Otsu tissue mask, overlapping tile grid, tile labels
- ``data``: manifests, patient splits, instance dropout, bags, synthetic slides
- ``backbone`` / ``heads`` / ``models``: feature extractor, SE attention module, projection heads, CAM
- ``mil``: attention weights, bag aggregation, bag classifier
- ``training`` / ``checkpoint``: training loops, binary checkpoints, CSV logs
- ``evaluation`` / ``heatmaps``: metrics, ROC/AUC, slide heatmaps
- ``pipeline`` / ``cli``: glue and the ``python -m seamil`` entry point
"""

__version__ = "0.1.0"
