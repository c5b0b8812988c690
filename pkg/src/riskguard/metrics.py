"""Calibration and out-of-distribution detection metrics.

Bins are right-closed, ``((m-1)/M, m/M]``, with confidence 0 placed in the
first bin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import EmptyInput, RiskguardError

MMCE_BANDWIDTH = 0.4


@dataclass(frozen=True)
class ScoredPrediction:
    confidence: float
    correct: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise RiskguardError("confidence must lie in [0, 1]")
        if self.correct not in (0, 1):
            raise RiskguardError("correctness must be 0 or 1")


@dataclass(frozen=True)
class BinningConfig:
    bins: int = 10

    def __post_init__(self):
        if int(self.bins) < 1:
            raise RiskguardError("need at least one bin")


@dataclass(frozen=True)
class ReliabilityBin:
    index: int  # 1-based
    lower: float
    upper: float
    confidence: float
    accuracy: float
    count: int


def _unpack(preds) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(preds, tuple) and len(preds) == 2 and not isinstance(preds[0], ScoredPrediction):
        r, c = (np.asarray(a, dtype=float).ravel() for a in preds)
    else:
        r = np.array([p.confidence for p in preds], dtype=float)
        c = np.array([p.correct for p in preds], dtype=float)
    if r.size == 0:
        raise EmptyInput("no predictions")
    if r.size != c.size:
        raise RiskguardError("confidences and correctness differ in length")
    return r, c


def bin_index(r, cfg: BinningConfig) -> np.ndarray:
    """0-based bin of each confidence."""
    edges = np.arange(1, cfg.bins + 1) / cfg.bins
    return np.minimum(np.searchsorted(edges, np.asarray(r, dtype=float), side="left"), cfg.bins - 1)


def reliability_diagram(preds, cfg: BinningConfig = BinningConfig()) -> list[ReliabilityBin]:
    """Per-bin mean confidence, accuracy and count for every non-empty bin.

    ``preds`` is a sequence of :class:`ScoredPrediction` or a
    ``(confidences, correctness)`` pair of arrays.
    """
    r, c = _unpack(preds)
    b = bin_index(r, cfg)
    count = np.bincount(b, minlength=cfg.bins)
    conf = np.bincount(b, weights=r, minlength=cfg.bins)
    acc = np.bincount(b, weights=c, minlength=cfg.bins)
    return [ReliabilityBin(m + 1, m / cfg.bins, (m + 1) / cfg.bins, conf[m] / count[m], acc[m] / count[m],
                           int(count[m]))
            for m in np.flatnonzero(count)]


def ece(preds, cfg: BinningConfig = BinningConfig()) -> float:
    """Expected calibration error."""
    r, _ = _unpack(preds)
    n = r.size
    return float(sum(b.count / n * abs(b.accuracy - b.confidence) for b in reliability_diagram(preds, cfg)))


def mmce(preds, bandwidth: float = MMCE_BANDWIDTH, chunk: int = 2048) -> float:
    """Kernel calibration error with the Laplacian kernel ``exp(-|r_i - r_j| / h)``."""
    if not bandwidth > 0:
        raise RiskguardError("bandwidth must be positive")
    r, c = _unpack(preds)
    e = c - r
    total = 0.0
    for i in range(0, r.size, chunk):
        k = np.exp(-np.abs(r[i:i + chunk, None] - r[None, :]) / bandwidth)
        total += float(e[i:i + chunk] @ k @ e)
    return math.sqrt(max(total, 0.0) / r.size**2)


def _hist(x, cfg: BinningConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float).ravel()
    if x.size == 0:
        raise EmptyInput("no confidences")
    return np.bincount(bin_index(x, cfg), minlength=cfg.bins) / x.size


def ood_detection_probability(id_confidences, ood_confidences,
                              cfg: BinningConfig = BinningConfig()) -> tuple[float, float]:
    """Histogram total variation between ID and OOD confidences, and ``(1 + TV)/2``."""
    tv = 0.5 * float(np.abs(_hist(id_confidences, cfg) - _hist(ood_confidences, cfg)).sum())
    tv = min(max(tv, 0.0), 1.0)
    return tv, (1.0 + tv) / 2.0


def scored_predictions(probs: np.ndarray, labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Top-1 confidence and correctness for a batch of predictive distributions."""
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    return probs.max(axis=1), (probs.argmax(axis=1) == labels).astype(float)
