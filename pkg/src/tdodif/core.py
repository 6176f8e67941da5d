"""Raster data model shared by every stage of the pipeline.

Rasters are numpy arrays indexed ``[row, col]`` (``[y, x]``); multi-channel
maps are planar, ``[channel, y, x]``.  Class ids are ``1..C`` with ``0``
reserved for "unlabeled / ignore".  All containers hold read-only views so
they can be shared across workers without copying.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError


def _frozen(a: np.ndarray) -> np.ndarray:
    v = a.view()
    v.setflags(write=False)
    return v


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-pixel class ids, ``0`` = unlabeled."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.uint8)
        if d.ndim != 2 or d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError(f"label map must be a non-empty 2-D array, got shape {d.shape}")
        if self.num_classes < 1 or self.num_classes > 255:
            raise ValueError(f"num_classes must be in [1, 255], got {self.num_classes}")
        if d.size and int(d.max()) > self.num_classes:
            raise ValueError(f"label value {int(d.max())} exceeds num_classes={self.num_classes}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def labeled_count(self) -> int:
        return int(np.count_nonzero(self.data))

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return self.num_classes == other.num_classes and np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class ProbMap:
    """Per-pixel class probabilities, planar ``[C, H, W]`` float32.

    Channel ``k`` holds the probability of class ``k + 1``.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float32)
        if d.ndim != 3 or min(d.shape) < 1:
            raise ValueError(f"prob map must be a non-empty [C, H, W] array, got shape {d.shape}")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]

    def max_sum_deviation(self) -> float:
        """Largest ``|sum_c p - 1|`` over all pixels."""
        s = self.data.astype(np.float64).sum(axis=0)
        return float(np.abs(s - 1.0).max())

    def check_softmax(self, tol: float = 1e-3) -> None:
        """Raise :class:`FormatError` unless values lie in [0,1] and each pixel sums to 1 +- tol."""
        lo, hi = float(self.data.min()), float(self.data.max())
        if lo < 0.0 or hi > 1.0:
            raise FormatError(f"probabilities outside [0, 1] (min {lo:.6g}, max {hi:.6g})")
        dev = self.max_sum_deviation()
        if dev > tol:
            raise FormatError(f"channel sums deviate from 1 by up to {dev:.6g} (tolerance {tol:g})")

    def __eq__(self, other):
        if not isinstance(other, ProbMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class FlowField:
    """Dense displacement ``(u, v)`` in pixels, defined on the reference grid."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float32)
        v = np.ascontiguousarray(self.v, dtype=np.float32)
        if u.shape != v.shape or u.ndim != 2:
            raise ValueError(f"flow components must be equal 2-D shapes, got {u.shape} and {v.shape}")
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValueError("flow contains non-finite values")
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "v", _frozen(v))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    def __eq__(self, other):
        if not isinstance(other, FlowField):
            return NotImplemented
        return np.array_equal(self.u, other.u) and np.array_equal(self.v, other.v)


@dataclass(frozen=True, eq=False)
class ConfidenceMap:
    """Per-pixel flow reliability in [0, 1]; values outside are clamped.

    ``clamped`` counts entries that had to be clamped on construction.
    """

    data: np.ndarray
    clamped: int = field(default=0, compare=False)

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.ndim != 2:
            raise ValueError(f"confidence map must be 2-D, got shape {d.shape}")
        bad = int(np.count_nonzero((d < 0) | (d > 1)))
        if bad:
            d = np.clip(d, 0.0, 1.0)
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(d)))
        object.__setattr__(self, "clamped", self.clamped + bad)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, ConfidenceMap):
            return NotImplemented
        return np.array_equal(self.data, other.data)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Planar ``[D, h, w]`` feature tensor (float64)."""

    data: np.ndarray

    def __post_init__(self):
        d = np.ascontiguousarray(self.data, dtype=np.float64)
        if d.ndim != 3 or d.shape[0] < 1:
            raise ValueError(f"feature map must be [D, h, w] with D >= 1, got shape {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("feature map contains NaN or Inf")
        object.__setattr__(self, "data", _frozen(d))

    @property
    def dim(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1:]


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two vectors; 0.0 if either has zero norm."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a / na, b / nb), -1.0, 1.0))


def argmax_channel(p: ProbMap, y: int, x: int) -> int:
    """1-based class of the largest channel at pixel ``(y, x)``; ties go to the lowest class."""
    return int(np.argmax(p.data[:, y, x])) + 1


def argmax_labels(p: ProbMap | np.ndarray) -> np.ndarray:
    """Vectorised :func:`argmax_channel` over the whole map, as a uint8 array."""
    data = p.data if isinstance(p, ProbMap) else np.asarray(p)
    return (np.argmax(data, axis=0) + 1).astype(np.uint8)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def check_same_shape(*maps) -> tuple[int, int]:
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ValueError(f"dimension mismatch: {sorted(shapes)}")
    return shapes.pop()
