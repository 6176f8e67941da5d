"""Optical-flow temporal diffusion: warp near-view labels onto the far view and fuse.

Labels are categorical, so warping is a forward nearest-pixel splat rather than
interpolation: reference pixel ``q`` deposits its label and probability column
at ``round(q + F(q))`` when its flow is confident.  When several reference
pixels land on one target pixel, the one with the higher flow confidence wins,
then the later one in row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfidenceMap, FlowField, LabelMap, ProbMap, check_same_shape


@dataclass(eq=False)
class WarpedReference:
    labels: LabelMap
    probs: np.ndarray  # [C, H, W] float32, zero where nothing landed
    hit: np.ndarray  # bool [H, W]
    source: np.ndarray  # int64 [H, W], flat reference index that landed, -1 where no hit


@dataclass(eq=False)
class TemporalFusion:
    labels: LabelMap
    fused_sums: np.ndarray  # [C, H, W]; summed probability vectors where fused, else 0
    fused: np.ndarray  # bool, case (a): both maps labeled, argmax of the sum
    copied: np.ndarray  # bool, case (b): label copied from the reference


def flow_mask(conf: ConfidenceMap | np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Binary reliability mask: ``conf > threshold`` (strict)."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    data = conf.data if isinstance(conf, ConfidenceMap) else np.asarray(conf)
    return data > threshold


def splat_targets(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Nearest target pixel ``(ty, tx)`` for every reference pixel, rounding half up."""
    h, w = flow.shape
    yy, xx = np.mgrid[0:h, 0:w]
    tx = np.floor(xx + flow.u.astype(np.float64) + 0.5).astype(np.int64)
    ty = np.floor(yy + flow.v.astype(np.float64) + 0.5).astype(np.int64)
    return ty, tx


def warp_reference(
    ref_labels: LabelMap,
    ref_probs: ProbMap,
    flow: FlowField,
    mask: np.ndarray,
    conf: ConfidenceMap | np.ndarray | None = None,
    target_shape: tuple[int, int] | None = None,
) -> WarpedReference:
    """Forward-splat reference labels and probabilities through a masked flow."""
    check_same_shape(ref_labels, ref_probs, flow)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != flow.shape:
        raise ValueError(f"mask shape {mask.shape} does not match flow {flow.shape}")
    if conf is None:
        pf = np.zeros(flow.shape)
    else:
        pf = conf.data if isinstance(conf, ConfidenceMap) else np.asarray(conf)
    th, tw = target_shape if target_shape is not None else flow.shape
    c = ref_probs.channels

    ty, tx = splat_targets(flow)
    ok = mask & (tx >= 0) & (tx < tw) & (ty >= 0) & (ty < th)
    q = np.flatnonzero(ok)
    tgt = (ty.ravel()[q] * tw + tx.ravel()[q])
    # last element of each target group wins: highest confidence, then largest q
    order = np.lexsort((q, pf.ravel()[q], tgt))
    tgt, q = tgt[order], q[order]
    last = np.ones(len(tgt), dtype=bool)
    last[:-1] = tgt[1:] != tgt[:-1]
    tgt, q = tgt[last], q[last]

    labels = np.zeros(th * tw, dtype=np.uint8)
    probs = np.zeros((c, th * tw), dtype=np.float32)
    source = np.full(th * tw, -1, dtype=np.int64)
    labels[tgt] = ref_labels.data.ravel()[q]
    probs[:, tgt] = ref_probs.data.reshape(c, -1)[:, q]
    source[tgt] = q
    return WarpedReference(
        labels=LabelMap(labels.reshape(th, tw), ref_labels.num_classes),
        probs=probs.reshape(c, th, tw),
        hit=(source >= 0).reshape(th, tw),
        source=source.reshape(th, tw),
    )


def temporal_fuse(target_labels: LabelMap, target_probs: ProbMap, warped: WarpedReference) -> TemporalFusion:
    """Fuse warped reference labels into the target's pseudo labels.

    (a) both labeled: argmax of the summed probability vectors;
    (b) only the reference labeled: copy the reference label;
    (c) otherwise keep the target label.
    """
    check_same_shape(target_labels, target_probs, warped.labels)
    yt = target_labels.data
    arrived = warped.hit & (warped.labels.data != 0)
    fused = arrived & (yt != 0)
    copied = arrived & (yt == 0)
    sums = np.zeros(target_probs.data.shape, dtype=np.float64)
    sums[:, fused] = target_probs.data[:, fused].astype(np.float64) + warped.probs[:, fused]
    out = yt.copy()
    out[fused] = (np.argmax(sums[:, fused], axis=0) + 1).astype(np.uint8)
    out[copied] = warped.labels.data[copied]
    c = max(target_labels.num_classes, warped.labels.num_classes)
    return TemporalFusion(LabelMap(out, c), sums, fused, copied)


def fused_prediction(pred: LabelMap, fusion: TemporalFusion) -> LabelMap:
    """Prediction map for a following spatial stage: fused argmax where fusion happened."""
    out = pred.data.copy()
    out[fusion.fused] = fusion.labels.data[fusion.fused]
    return LabelMap(out, pred.num_classes)
