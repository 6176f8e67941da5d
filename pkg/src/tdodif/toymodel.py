"""A per-pixel two-layer network standing in for the segmentation backbone.

``features (9) -> tanh hidden (h) -> logits (C)``.  The hidden activations are
the features the spatial and temporal losses act on; they are evaluated on a
strided grid of pixel centers so those losses see a downsampled feature map.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ProbMap, softmax
from .errors import FormatError
from .losses import (
    LossReport,
    sample_correspondences,
    seg_loss,
    spatial_loss,
    temporal_loss,
)

D_IN = 9
TOY_MAGIC = b"TOY1"
PARAMS = ("w1", "b1", "w2", "b2")


def pixel_features(image: np.ndarray) -> np.ndarray:
    """Hand-crafted per-pixel features in [0, 1], shape ``(H, W, 9)``.

    RGB, normalised x and y, 3x3 mean and std of gray, and absolute central
    differences of gray along x and y.  Borders clamp coordinates.
    """
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    h, w = rgb.shape[:2]
    gray = rgb @ np.array([0.299, 0.587, 0.114])
    p = np.pad(gray, 1, mode="edge")
    win = np.stack([p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
    mean = win.mean(axis=0)
    std = np.sqrt(np.maximum((win**2).mean(axis=0) - mean**2, 0.0))
    gx = np.abs(p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = np.abs(p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    feats = np.stack([
        rgb[..., 0], rgb[..., 1], rgb[..., 2],
        xx / w, yy / h,
        mean, np.minimum(2.0 * std, 1.0),
        np.minimum(2.0 * gx, 1.0), np.minimum(2.0 * gy, 1.0),
    ], axis=-1)
    return feats


def feature_grid(h: int, w: int, stride: int):
    """Downsampled grid size and the pixel center sampled for each cell.

    Cell ``j`` covers ``[j*b, (j+1)*b)`` with ``b = W // fw`` (last cell takes
    the remainder), matching :func:`tdodif.slic.downsample_superpixels`.
    """
    fh, fw = max(1, h // stride), max(1, w // stride)
    bh, bw = h // fh, w // fw
    cy = np.arange(fh) * bh + bh // 2
    cx = np.arange(fw) * bw + bw // 2
    return fh, fw, cy, cx


def cell_of(y: np.ndarray, x: np.ndarray, h: int, w: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    fh, fw, _, _ = feature_grid(h, w, stride)
    return np.minimum(y // (h // fh), fh - 1), np.minimum(x // (w // fw), fw - 1)


@dataclass
class ToyModel:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, num_classes: int, hidden: int = 16, seed: int = 0, d_in: int = D_IN) -> "ToyModel":
        rng = np.random.default_rng(seed)
        l1, l2 = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(hidden)
        return cls(
            rng.uniform(-l1, l1, (d_in, hidden)),
            rng.uniform(-l1, l1, hidden),
            rng.uniform(-l2, l2, (hidden, num_classes)),
            rng.uniform(-l2, l2, num_classes),
        )

    @classmethod
    def zeros(cls, num_classes: int, hidden: int = 16, d_in: int = D_IN) -> "ToyModel":
        return cls(np.zeros((d_in, hidden)), np.zeros(hidden), np.zeros((hidden, num_classes)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAMS}

    def copy(self) -> "ToyModel":
        return ToyModel(*(getattr(self, k).copy() for k in PARAMS))


def forward(model: ToyModel, feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(hidden, logits)`` for ``[N, 9]`` (or a single 9-vector of) features."""
    x = np.asarray(feats, dtype=np.float64)
    hid = np.tanh(x @ model.w1 + model.b1)
    return hid, hid @ model.w2 + model.b2


def backward(model: ToyModel, x: np.ndarray, hid: np.ndarray, d_logits=None, d_hidden=None) -> dict:
    """Parameter gradients given upstream gradients on logits and/or hidden units."""
    g = {k: np.zeros_like(v) for k, v in model.params().items()}
    dh = np.zeros_like(hid)
    if d_logits is not None:
        g["w2"] += hid.T @ d_logits
        g["b2"] += d_logits.sum(axis=0)
        dh += d_logits @ model.w2.T
    if d_hidden is not None:
        dh += d_hidden
    dz = dh * (1.0 - hid**2)
    g["w1"] += x.T @ dz
    g["b1"] += dz.sum(axis=0)
    return g


def predict(model: ToyModel, image: np.ndarray, feats: np.ndarray | None = None) -> ProbMap:
    """Full-resolution softmax probabilities."""
    if feats is None:
        feats = pixel_features(image)
    h, w = feats.shape[:2]
    _, logits = forward(model, feats.reshape(-1, feats.shape[-1]))
    probs = softmax(logits, axis=1).T.reshape(model.num_classes, h, w)
    return ProbMap(probs.astype(np.float32))


# -- optimiser ---------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model: ToyModel, grads: dict, state: AdamState) -> ToyModel:
    state.step += 1
    t = state.step
    new = {}
    for k, p in model.params().items():
        g = grads[k]
        m = state.m.get(k, np.zeros_like(p))
        v = state.v.get(k, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        new[k] = p - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return ToyModel(**new)


# -- checkpoints -------------------------------------------------------------

def save_model(model: ToyModel, path) -> None:
    d_in, h = model.w1.shape
    parts = [TOY_MAGIC, struct.pack("<III", d_in, h, model.num_classes)]
    parts += [np.ascontiguousarray(getattr(model, k), dtype="<f4").tobytes() for k in PARAMS]
    Path(path).write_bytes(b"".join(parts))


def load_model(path) -> ToyModel:
    raw = Path(path).read_bytes()
    if raw[:4] != TOY_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}, expected {TOY_MAGIC!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    d_in, h, c = struct.unpack("<III", raw[4:16])
    shapes = [(d_in, h), (h,), (h, c), (c,)]
    need = 4 * sum(int(np.prod(s)) for s in shapes)
    if len(raw) - 16 != need:
        raise FormatError(f"{path}: payload is {len(raw) - 16} bytes, header implies {need}")
    arrays, off = [], 16
    for s in shapes:
        n = int(np.prod(s))
        arrays.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(s).astype(np.float64))
        off += 4 * n
    return ToyModel(*arrays)


# -- training ----------------------------------------------------------------

@dataclass(eq=False)
class TrainImage:
    """One image prepared for training.

    ``labels`` is flat over all pixels (0 = ignore).  Target images may also
    carry a downsampled superpixel map (spatial loss) and correspondence data
    on the feature grid (temporal loss): ``hit``, ``source`` (flat index in the
    reference feature grid), ``pred`` (predicted class per cell) and the
    reference's sampled features ``ref_sub``.
    """

    feats: np.ndarray  # [N, 9]
    labels: np.ndarray  # [N]
    sub: np.ndarray | None = None  # [fh*fw, 9] features at cell centers
    sub_shape: tuple[int, int] | None = None
    sp_down: np.ndarray | None = None  # [fh, fw]
    hit: np.ndarray | None = None  # [fh, fw] bool
    source: np.ndarray | None = None  # [fh, fw]
    pred: np.ndarray | None = None  # [fh, fw]
    ref_sub: np.ndarray | None = None  # [fr*fr_w, 9]
    ref_shape: tuple[int, int] | None = None

    @property
    def has_temporal(self) -> bool:
        return self.hit is not None and self.ref_sub is not None


def subsample_features(feats: np.ndarray, stride: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = feats.shape[:2]
    fh, fw, cy, cx = feature_grid(h, w, stride)
    return feats[cy[:, None], cx[None, :]].reshape(fh * fw, -1), (fh, fw)


def draw_samples(items, n_pos: int, n_neg: int, rng: np.random.Generator) -> list:
    return [
        sample_correspondences(it.hit, it.pred, n_pos, n_neg, rng, it.source) if it.has_temporal else None
        for it in items
    ]


def objective(model: ToyModel, sources, targets, samples, alpha_t=1.0, alpha_spa=0.1, alpha_tem=5.0,
              use_spatial=True, use_temporal=True) -> tuple[LossReport, dict]:
    """Combined objective on one batch and its parameter gradients."""
    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    rep = LossReport()

    def add(g, scale=1.0):
        for k in grads:
            grads[k] += scale * g[k]

    for it in sources:
        hid, logits = forward(model, it.feats)
        r = seg_loss(logits, it.labels)
        rep.l_seg_src += r.value / len(sources)
        add(backward(model, it.feats, hid, d_logits=r.grad), 1.0 / len(sources))

    spa_items = [it for it in targets if use_spatial and it.sp_down is not None and alpha_spa > 0]
    tem_items = [(it, s) for it, s in zip(targets, samples or [None] * len(targets))
                 if use_temporal and s is not None and it.has_temporal and alpha_tem > 0]
    for it in targets:
        hid, logits = forward(model, it.feats)
        r = seg_loss(logits, it.labels)
        rep.l_seg_tgt += r.value / len(targets)
        add(backward(model, it.feats, hid, d_logits=r.grad), alpha_t / len(targets))
    for it in spa_items:
        hid, _ = forward(model, it.sub)
        fh, fw = it.sub_shape
        r = spatial_loss(hid.T.reshape(-1, fh, fw), it.sp_down)
        rep.l_spa += r.value / len(spa_items)
        dh = r.grad.reshape(hid.shape[1], -1).T
        add(backward(model, it.sub, hid, d_hidden=dh), alpha_spa / len(spa_items))
    for it, s in tem_items:
        hid_t, _ = forward(model, it.sub)
        hid_r, _ = forward(model, it.ref_sub)
        fh, fw = it.sub_shape
        rh, rw = it.ref_shape
        r = temporal_loss(hid_t.T.reshape(-1, fh, fw), hid_r.T.reshape(-1, rh, rw), s)
        rep.l_tem += r.value / len(tem_items)
        gt, gr = r.grad
        scale = alpha_tem / len(tem_items)
        add(backward(model, it.sub, hid_t, d_hidden=gt.reshape(hid_t.shape[1], -1).T), scale)
        add(backward(model, it.ref_sub, hid_r, d_hidden=gr.reshape(hid_r.shape[1], -1).T), scale)
    rep.l_final = (rep.l_seg_src + alpha_t * rep.l_seg_tgt) + alpha_spa * rep.l_spa + alpha_tem * rep.l_tem
    return rep, grads


def train_epoch(model: ToyModel, opt: AdamState, targets, sources, cfg, rng: np.random.Generator,
                use_spatial=True, use_temporal=True) -> tuple[ToyModel, LossReport]:
    """One shuffled pass over the target images (or over the sources when there are none).

    Each step pairs ``batch_size`` target images with ``batch_size`` source
    images (cycled) and takes one Adam step on the combined objective.
    """
    targets, sources = list(targets), list(sources)
    if not targets and not sources:
        raise ValueError("train_epoch needs at least one image")
    bs = cfg.batch_size
    driver = targets if targets else sources
    order = rng.permutation(len(driver))
    src_order = rng.permutation(len(sources)) if sources else np.zeros(0, dtype=int)
    total = LossReport()
    steps = 0
    for start in range(0, len(order), bs):
        idx = order[start:start + bs]
        if targets:
            tb = [targets[i] for i in idx]
            sb = [sources[src_order[(start + j) % len(sources)]] for j in range(len(idx))] if sources else []
        else:
            tb, sb = [], [sources[i] for i in idx]
        samples = draw_samples(tb, cfg.n_pos, cfg.n_neg, rng) if use_temporal else None
        rep, grads = objective(model, sb, tb, samples, cfg.alpha_t, cfg.alpha_spa, cfg.alpha_tem,
                               use_spatial, use_temporal)
        model = adam_step(model, grads, opt)
        for k in ("l_seg_src", "l_seg_tgt", "l_spa", "l_tem", "l_final"):
            setattr(total, k, getattr(total, k) + getattr(rep, k))
        steps += 1
    for k in ("l_seg_src", "l_seg_tgt", "l_spa", "l_tem", "l_final"):
        setattr(total, k, getattr(total, k) / steps)
    return model, total
