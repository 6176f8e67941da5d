"""Training objectives and their analytic gradients.

* segmentation: masked softmax cross-entropy (label 0 ignored)
* spatial: mean over superpixels of ``1 - mean_p cos(f(p), centroid)``
* temporal: InfoNCE over flow correspondences, one positive against
  different-class negatives drawn from the target image
* combined: ``src + alpha_t*tgt + alpha_spa*spatial + alpha_tem*temporal``

Feature maps are planar ``[D, h, w]`` arrays; gradients come back in the same
layout.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import FeatureMap, LabelMap, softmax

log = logging.getLogger(__name__)


class LossResult(NamedTuple):
    value: float
    grad: object
    count: int  # labeled pixels / superpixels / positives that contributed

    @property
    def empty(self) -> bool:
        return self.count == 0


@dataclass
class CorrespondenceSample:
    """Positive pairs ``(pos_t[i], pos_r[i])`` and ``neg[i]`` negatives, as flat indices."""

    pos_t: np.ndarray
    pos_r: np.ndarray
    neg: np.ndarray  # [P, n_neg]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.pos_t)

    @classmethod
    def empty(cls, n_neg: int = 1) -> "CorrespondenceSample":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros((0, n_neg), dtype=np.int64))


@dataclass
class LossReport:
    l_seg_src: float = 0.0
    l_seg_tgt: float = 0.0
    l_spa: float = 0.0
    l_tem: float = 0.0
    l_final: float = 0.0
    grads: dict = field(default_factory=dict, repr=False)

    @property
    def l_seg(self) -> float:
        return self.l_seg_src + self.l_seg_tgt

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("l_seg_src", "l_seg_tgt", "l_spa", "l_tem", "l_final")}

    def format(self) -> str:
        return "\n".join(f"{k} = {v:.10g}" for k, v in self.as_dict().items())


def _features(f) -> np.ndarray:
    return f.data if isinstance(f, FeatureMap) else np.asarray(f, dtype=np.float64)


def seg_loss(logits: np.ndarray, labels, alpha: float = 1.0) -> LossResult:
    """Mean cross-entropy over labeled pixels, scaled by ``alpha``.

    ``logits`` is ``[N, C]`` (pixel-major) or planar ``[C, H, W]``; the gradient
    has the same layout.
    """
    lab = labels.data if isinstance(labels, LabelMap) else np.asarray(labels)
    logits = np.asarray(logits, dtype=np.float64)
    planar = logits.ndim == 3
    z = logits.reshape(logits.shape[0], -1).T if planar else logits
    y = lab.ravel().astype(np.int64)
    if z.shape[0] != y.shape[0]:
        raise ValueError(f"{z.shape[0]} logit rows vs {y.shape[0]} labels")
    if y.max(initial=0) > z.shape[1]:
        raise ValueError("label exceeds the number of logit channels")
    grad = np.zeros_like(z)
    idx = np.flatnonzero(y)
    n = len(idx)
    if n == 0:
        log.debug("seg_loss: no labeled pixels")
        value = 0.0
    else:
        zl = z[idx]
        zs = zl - zl.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        value = float(alpha * np.mean(lse - zs[np.arange(n), y[idx] - 1]))
        g = softmax(zl, axis=1)
        g[np.arange(n), y[idx] - 1] -= 1.0
        grad[idx] = alpha * g / n
    if planar:
        grad = grad.T.reshape(logits.shape)
    return LossResult(value, grad, n)


def _cos_rows(a: np.ndarray, b: np.ndarray):
    """Row-wise cosine and its gradients w.r.t. ``a`` and ``b`` (zero-norm rows give 0)."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ok = (na > 0) & (nb > 0)
    inv = np.where(ok, 1.0 / np.where(ok, na * nb, 1.0), 0.0)
    dot = np.einsum("ij,ij->i", a, b)
    cos = dot * inv
    ia2 = np.where(ok, 1.0 / np.where(ok, na**2, 1.0), 0.0)
    ib2 = np.where(ok, 1.0 / np.where(ok, nb**2, 1.0), 0.0)
    da = b * inv[:, None] - a * (cos * ia2)[:, None]
    db = a * inv[:, None] - b * (cos * ib2)[:, None]
    return cos, da, db


def spatial_loss(features, assignment: np.ndarray) -> LossResult:
    """``(1/S) * sum_i (1 - mean_{p in sp_i} cos(f(p), eta_i))`` with ``eta_i`` the member mean."""
    f = _features(features)
    d = f.shape[0]
    a = np.asarray(assignment).ravel().astype(np.int64)
    if f.shape[1:] != np.asarray(assignment).shape:
        raise ValueError(f"feature grid {f.shape[1:]} does not match superpixels {np.asarray(assignment).shape}")
    x = f.reshape(d, -1).T  # [N, D]
    n_sp = int(a.max()) + 1
    sizes = np.bincount(a, minlength=n_sp).astype(np.float64)
    live = sizes > 0
    s = int(live.sum())
    eta = np.stack([np.bincount(a, weights=x[:, j], minlength=n_sp) for j in range(d)], axis=1)
    eta[live] /= sizes[live, None]
    cos, dx, deta = _cos_rows(x, eta[a])
    per_sp = np.bincount(a, weights=cos, minlength=n_sp)
    per_sp[live] /= sizes[live]
    value = float(np.sum(1.0 - per_sp[live]) / s)
    # dL/dx_q = -(1/S)(1/n_i) [ dcos_q/dx_q + sum_p dcos_p/deta * (1/n_i) ]
    g_eta = np.stack([np.bincount(a, weights=deta[:, j], minlength=n_sp) for j in range(d)], axis=1)
    g_eta[live] /= sizes[live, None]
    gx = -(dx + g_eta[a]) / (sizes[a][:, None] * s)
    return LossResult(value, gx.T.reshape(f.shape), s)


def sample_correspondences(
    hit: np.ndarray,
    pred: np.ndarray,
    n_pos: int,
    n_neg: int,
    rng: np.random.Generator,
    source: np.ndarray | None = None,
) -> CorrespondenceSample:
    """Draw up to ``n_pos`` positives among ``hit`` pixels and ``n_neg`` negatives each.

    Negatives are uniform over target pixels whose predicted class differs from
    the positive's.  ``source`` maps each target pixel to the flat index of its
    correspondence in the reference grid (identity if omitted).  Positives
    without any valid negative are dropped.
    """
    if n_pos < 0 or n_neg < 0:
        raise ValueError("n_pos and n_neg must be >= 0")
    hit = np.asarray(hit, dtype=bool).ravel()
    pred = (pred.data if isinstance(pred, LabelMap) else np.asarray(pred)).ravel()
    src = np.arange(hit.size) if source is None else np.asarray(source).ravel()
    cand = np.flatnonzero(hit)
    if n_pos == 0 or cand.size == 0:
        return CorrespondenceSample.empty(n_neg)
    pos = rng.choice(cand, size=min(n_pos, cand.size), replace=False)
    by_class = {}
    keep_t, keep_r, negs, dropped = [], [], [], 0
    for p in pos.tolist():
        c = int(pred[p])
        if c not in by_class:
            by_class[c] = np.flatnonzero(pred != c)
        others = by_class[c]
        if others.size == 0:
            dropped += 1
            continue
        keep_t.append(p)
        keep_r.append(int(src[p]))
        negs.append(rng.choice(others, size=n_neg, replace=others.size < n_neg))
    if dropped:
        log.debug("sample_correspondences: dropped %d positives without a different-class negative", dropped)
    if not keep_t:
        out = CorrespondenceSample.empty(n_neg)
        out.dropped = dropped
        return out
    return CorrespondenceSample(
        np.array(keep_t, dtype=np.int64),
        np.array(keep_r, dtype=np.int64),
        np.array(negs, dtype=np.int64).reshape(len(keep_t), n_neg),
        dropped,
    )


def temporal_loss(f_t, f_r, sample: CorrespondenceSample) -> LossResult:
    """InfoNCE over cosine similarities; gradient is ``(grad_target, grad_reference)``."""
    ft = _features(f_t)
    fr = _features(f_r)
    d = ft.shape[0]
    xt = ft.reshape(d, -1).T
    xr = fr.reshape(d, -1).T
    gt = np.zeros_like(xt)
    gr = np.zeros_like(xr)
    p = len(sample)
    if p == 0:
        return LossResult(0.0, (gt.T.reshape(ft.shape), gr.T.reshape(fr.shape)), 0)
    anchors = xt[sample.pos_t]
    s_pos, da_pos, db_pos = _cos_rows(anchors, xr[sample.pos_r])
    k = sample.neg.shape[1]
    neg_flat = sample.neg.ravel()
    rep = np.repeat(sample.pos_t, k)
    s_neg, da_neg, db_neg = _cos_rows(xt[rep], xt[neg_flat])
    logits = np.concatenate([s_pos[:, None], s_neg.reshape(p, k)], axis=1)
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))).ravel()
    value = float(np.mean(lse - s_pos))
    w = softmax(logits, axis=1)
    c_pos = (w[:, 0] - 1.0) / p
    c_neg = (w[:, 1:] / p).ravel()
    np.add.at(gt, sample.pos_t, c_pos[:, None] * da_pos)
    np.add.at(gr, sample.pos_r, c_pos[:, None] * db_pos)
    np.add.at(gt, rep, c_neg[:, None] * da_neg)
    np.add.at(gt, neg_flat, c_neg[:, None] * db_neg)
    return LossResult(value, (gt.T.reshape(ft.shape), gr.T.reshape(fr.shape)), p)


def combine(l_seg_src: float, l_seg_tgt: float, l_spa: float, l_tem: float,
            alpha_t: float = 1.0, alpha_spa: float = 0.1, alpha_tem: float = 5.0) -> float:
    if min(alpha_t, alpha_spa, alpha_tem) < 0:
        raise ValueError("loss weights must be >= 0")
    return (l_seg_src + alpha_t * l_seg_tgt) + alpha_spa * l_spa + alpha_tem * l_tem
