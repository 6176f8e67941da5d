"""Superpixel-based spatial diffusion of pseudo labels.

Within each superpixel, every class that has at least one seed pseudo label
is spread to all pixels of that superpixel whose prediction is the same class.
Pixels predicted as a class without a seed in their superpixel stay unlabeled.
"""

from __future__ import annotations

import logging

import numpy as np

from .core import LabelMap, check_same_shape
from .slic import SuperpixelMap

log = logging.getLogger(__name__)


def _assignment(sp) -> np.ndarray:
    return sp.assignment if isinstance(sp, SuperpixelMap) else np.asarray(sp)


def seed_conflicts(pred: LabelMap, init: LabelMap) -> int:
    """Count seeds whose class disagrees with the prediction at the same pixel."""
    return int(np.count_nonzero((init.data != 0) & (init.data != pred.data)))


def spatial_diffuse(pred: LabelMap, init: LabelMap, sp: SuperpixelMap | np.ndarray) -> LabelMap:
    """Diffuse seed labels ``init`` through superpixels guided by prediction ``pred``.

    Runs in two linear passes: collect the seed classes present in each
    superpixel, then label each pixel whose predicted class is among them.
    A seed that disagrees with ``pred`` keeps its own class.
    """
    assign = _assignment(sp)
    if assign.shape != pred.shape:
        raise ValueError(f"dimension mismatch: superpixels {assign.shape} vs labels {pred.shape}")
    check_same_shape(pred, init)
    c = max(pred.num_classes, init.num_classes)
    n = int(assign.max()) + 1
    seeds = init.data != 0
    present = np.zeros((n, c + 1), dtype=bool)
    present[assign[seeds], init.data[seeds]] = True
    present[:, 0] = False
    out = np.where(present[assign, pred.data], pred.data, 0).astype(np.uint8)
    conflict = seeds & (init.data != pred.data)
    if conflict.any():
        log.debug("spatial diffusion: %d seed labels disagree with the prediction", int(conflict.sum()))
        out[conflict] = init.data[conflict]
    return LabelMap(out, c)

