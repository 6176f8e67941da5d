"""Class-balanced confidence thresholds and initial pseudo-label selection.

For every class ``c`` the threshold is the confidence below which the
``p`` most confident fraction of all pixels predicted as ``c`` (over the whole
target set) is cut off.  Thresholds come either from a streaming fixed-bin
histogram (:class:`ClassConfidenceAccumulator`) or from an exact sort
(:func:`thresholds_exact`), which tests use as the reference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import LabelMap, ProbMap, argmax_labels
from .errors import ConfigError, FormatError

DEFAULT_BINS = 4096


def _required(p: float, count: int) -> int:
    # smallest integer mass that is >= p * count (guarding against 0.1*3 > 0.3 style rounding)
    return max(1, math.ceil(p * count - 1e-9))


@dataclass
class ClassThresholds:
    """Per-class thresholds ``lam[c-1]``; ``empty[c-1]`` marks classes with no support."""

    lam: np.ndarray
    p: float
    source: str = "histogram"
    empty: np.ndarray | None = None

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if self.empty is None:
            self.empty = np.zeros(len(self.lam), dtype=bool)
        self.empty = np.asarray(self.empty, dtype=bool)
        if self.lam.ndim != 1 or len(self.empty) != len(self.lam):
            raise ValueError("thresholds must be a 1-D array with a matching empty mask")
        if ((self.lam < 0) | (self.lam > 1)).any():
            raise ValueError("thresholds must lie in [0, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.lam)

    def to_text(self) -> str:
        lines = [f"# p = {self.p}", f"# source = {self.source}"]
        for c, (v, e) in enumerate(zip(self.lam, self.empty), 1):
            lines.append(f"class {c} lambda {float(v)!r}" + (" empty" if e else ""))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ClassThresholds":
        lam, empty, p, source = {}, {}, float("nan"), "histogram"
        for raw in text.splitlines():
            line = raw.strip()
            if line.startswith("# p ="):
                try:
                    p = float(line.split("=", 1)[1])
                except ValueError:
                    raise FormatError(f"bad threshold line {raw!r}") from None
                continue
            if line.startswith("# source ="):
                source = line.split("=", 1)[1].strip()
                continue
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) not in (4, 5) or parts[0] != "class" or parts[2] != "lambda":
                raise FormatError(f"bad threshold line {raw!r}")
            try:
                k, v = int(parts[1]), float(parts[3])
            except ValueError:
                raise FormatError(f"bad threshold line {raw!r}") from None
            if len(parts) == 5 and parts[4] != "empty":
                raise FormatError(f"bad threshold line {raw!r}")
            lam[k], empty[k] = v, len(parts) == 5
        if not lam or sorted(lam) != list(range(1, len(lam) + 1)):
            raise FormatError("threshold file must list classes 1..C exactly once")
        n = len(lam)
        try:
            return cls(np.array([lam[k] for k in range(1, n + 1)]), p, source,
                       np.array([empty[k] for k in range(1, n + 1)]))
        except ValueError as e:
            raise FormatError(str(e)) from None


def read_thresholds(path) -> ClassThresholds:
    return ClassThresholds.from_text(Path(path).read_text(encoding="utf-8"))


def write_thresholds(th: ClassThresholds, path) -> None:
    Path(path).write_text(th.to_text(), encoding="utf-8")


def max_confidence(probs: ProbMap) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ``(argmax class, max probability)`` as flat arrays."""
    cls = argmax_labels(probs).ravel()
    conf = probs.data.max(axis=0).ravel().astype(np.float64)
    return cls, conf


@dataclass
class ClassConfidenceAccumulator:
    """Per-class histogram of max-channel confidences over ``bins`` equal bins of [0, 1]."""

    num_classes: int
    bins: int = DEFAULT_BINS
    hist: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.hist is None:
            self.hist = np.zeros((self.num_classes, self.bins), dtype=np.int64)

    @property
    def counts(self) -> np.ndarray:
        return self.hist.sum(axis=1)

    def bin_index(self, conf: np.ndarray) -> np.ndarray:
        return np.minimum((np.asarray(conf, dtype=np.float64) * self.bins).astype(np.int64), self.bins - 1)

    def add(self, classes: np.ndarray, conf: np.ndarray) -> "ClassConfidenceAccumulator":
        """Add raw ``(class, confidence)`` samples, classes 1-based."""
        classes = np.asarray(classes, dtype=np.int64).ravel()
        b = self.bin_index(np.asarray(conf).ravel())
        key = (classes - 1) * self.bins + b
        self.hist += np.bincount(key, minlength=self.num_classes * self.bins).reshape(self.num_classes, self.bins)
        return self

    def merge(self, other: "ClassConfidenceAccumulator") -> "ClassConfidenceAccumulator":
        if (self.num_classes, self.bins) != (other.num_classes, other.bins):
            raise ValueError("cannot merge accumulators with different shapes")
        return ClassConfidenceAccumulator(self.num_classes, self.bins, self.hist + other.hist)

    def __add__(self, other):
        return self.merge(other)


def accumulate(probs: ProbMap, acc: ClassConfidenceAccumulator) -> ClassConfidenceAccumulator:
    """Return a new accumulator with every pixel of ``probs`` binned under its argmax class."""
    if probs.channels != acc.num_classes:
        raise ConfigError(f"prob map has {probs.channels} channels, accumulator expects {acc.num_classes}")
    cls, conf = max_confidence(probs)
    out = ClassConfidenceAccumulator(acc.num_classes, acc.bins, acc.hist.copy())
    return out.add(cls, conf)


def thresholds_from_acc(acc: ClassConfidenceAccumulator, p: float) -> ClassThresholds:
    """Lower edge of the highest bin at which the top-down mass first reaches ``p * count``."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    lam = np.ones(acc.num_classes)
    empty = np.zeros(acc.num_classes, dtype=bool)
    for c in range(acc.num_classes):
        h = acc.hist[c]
        n = int(h.sum())
        if n == 0:
            empty[c] = True
            continue
        top_down = np.cumsum(h[::-1])
        j = int(np.searchsorted(top_down, _required(p, n)))
        lam[c] = (acc.bins - 1 - j) / acc.bins
    return ClassThresholds(lam, p, "histogram", empty)


def thresholds_exact(classes: np.ndarray, conf: np.ndarray, num_classes: int, p: float) -> ClassThresholds:
    """Exact-sort thresholds: the ``ceil(p*n)``-th largest confidence of each class."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must be in (0, 1], got {p}")
    classes = np.asarray(classes).ravel()
    conf = np.asarray(conf, dtype=np.float64).ravel()
    lam = np.ones(num_classes)
    empty = np.zeros(num_classes, dtype=bool)
    for c in range(1, num_classes + 1):
        v = conf[classes == c]
        if v.size == 0:
            empty[c - 1] = True
            continue
        k = _required(p, v.size)
        lam[c - 1] = np.partition(v, v.size - k)[v.size - k]
    return ClassThresholds(lam, p, "exact", empty)


def select_pseudo_labels(probs: ProbMap, th: ClassThresholds) -> tuple[LabelMap, LabelMap]:
    """Return ``(pseudo, prediction)``.

    ``prediction`` is the per-pixel argmax class; ``pseudo`` keeps it where the
    winning probability is at least that class's threshold and is 0 elsewhere.
    """
    if probs.channels != th.num_classes:
        raise ConfigError(f"prob map has {probs.channels} channels, thresholds cover {th.num_classes}")
    pred = argmax_labels(probs)
    conf = probs.data.max(axis=0).astype(np.float64)
    idx = pred.astype(np.int64) - 1
    keep = (conf >= th.lam[idx]) & ~th.empty[idx]
    pseudo = np.where(keep, pred, 0).astype(np.uint8)
    c = probs.channels
    return LabelMap(pseudo, c), LabelMap(pred, c)
