"""Confusion matrices, IoU / mIoU and pseudo-label quality statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import LabelMap, check_same_shape


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns prediction (classes 1..C at index 0..C-1).

    Pixels predicted as 0 (unlabeled) land in ``unlabeled[g-1]``; pixels whose
    ground truth is 0 are counted in ``ignored`` only.
    """

    counts: np.ndarray
    unlabeled: np.ndarray
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64), np.zeros(num_classes, dtype=np.int64), 0)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum() + self.unlabeled.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.unlabeled + other.unlabeled, self.ignored + other.ignored)


def confusion(gt: LabelMap, pred: LabelMap, num_classes: int | None = None) -> ConfusionMatrix:
    check_same_shape(gt, pred)
    c = num_classes or max(gt.num_classes, pred.num_classes)
    g = gt.data.ravel().astype(np.int64)
    p = pred.data.ravel().astype(np.int64)
    valid = g != 0
    ignored = int((~valid).sum())
    g, p = g[valid], p[valid]
    lab = p != 0
    counts = np.bincount((g[lab] - 1) * c + (p[lab] - 1), minlength=c * c).reshape(c, c)
    unl = np.bincount(g[~lab] - 1, minlength=c)
    return ConfusionMatrix(counts, unl, ignored)


def miou(cm: ConfusionMatrix) -> tuple[list[float], float]:
    """Per-class IoU (NaN for excluded classes) and their mean.

    A class is excluded when it is absent from the ground truth and never
    predicted; a class present in the ground truth but never predicted scores 0.
    """
    tp = np.diag(cm.counts).astype(np.float64)
    gt_total = cm.counts.sum(axis=1) + cm.unlabeled
    pred_total = cm.counts.sum(axis=0)
    union = gt_total + pred_total - tp
    ious = np.full(cm.num_classes, np.nan)
    keep = union > 0
    ious[keep] = tp[keep] / union[keep]
    mean = float(np.mean(ious[keep])) if keep.any() else 0.0
    return ious.tolist(), mean


@dataclass
class PseudoLabelStats:
    labeled_fraction: float
    pseudo_miou: float
    class_counts: list[int] = field(default_factory=list)
    empty: bool = False

    def as_dict(self) -> dict:
        return {
            "labeled_fraction": self.labeled_fraction,
            "pseudo_miou": self.pseudo_miou,
            "class_counts": list(self.class_counts),
            "empty": self.empty,
        }


def pseudo_stats(pseudo: LabelMap, gt: LabelMap, num_classes: int | None = None) -> PseudoLabelStats:
    """Coverage over all pixels, and mIoU over pixels labeled in both maps."""
    return pseudo_stats_many([pseudo], [gt], num_classes)


def pseudo_stats_many(pseudos, gts, num_classes: int | None = None) -> PseudoLabelStats:
    """Dataset-level statistics: pixel counts and confusion matrices are summed first."""
    c = num_classes or max(max(m.num_classes for m in pseudos), max(m.num_classes for m in gts))
    total = labeled = 0
    cm = ConfusionMatrix.empty(c)
    counts = np.zeros(c + 1, dtype=np.int64)
    for ps, gt in zip(pseudos, gts):
        check_same_shape(ps, gt)
        total += ps.data.size
        labeled += int(np.count_nonzero(ps.data))
        counts += np.bincount(ps.data.ravel(), minlength=c + 1)
        both = (ps.data != 0) & (gt.data != 0)
        cm = cm + confusion(LabelMap(np.where(both, gt.data, 0), c), LabelMap(np.where(both, ps.data, 0), c), c)
    empty = cm.total == 0
    value = 0.0 if empty else miou(cm)[1]
    return PseudoLabelStats(labeled / total if total else 0.0, value, counts[1:].tolist(), empty)


def format_iou_table(ious, mean: float, names=None) -> str:
    lines = []
    for k, v in enumerate(ious, 1):
        name = names[k - 1] if names else f"class{k}"
        lines.append(f"{name:>16s}  {'excluded' if np.isnan(v) else f'{100 * v:6.2f}'}")
    lines.append(f"{'mIoU':>16s}  {100 * mean:6.2f}")
    return "\n".join(lines)
