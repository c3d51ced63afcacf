"""Desk-scale semantic lung segmentation.

Subpackages:
    ops       dense tensor numerics (dilated conv, resize, batch norm, ...)
    net       encoder / ASPP / decoder network, checkpoints
    train     loss, optimizer, augmentation, dataset split, training loop
    postproc  connected components and largest-component filtering
    metrics   confusion counts, region metrics, boundary F1, aggregation
    data      image and mask I/O, manifests, phantom generator, overlays
    cli       command-line pipeline driver
"""

__version__ = "0.1.0"
