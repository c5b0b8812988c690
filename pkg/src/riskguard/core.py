"""Shared domain types, validation errors and the randomness contract."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

# input tolerance on the raw sum; renormalization only kicks in past the
# second (tiny) threshold so that re-parsing a normalized vector is a no-op
SUM_TOLERANCE = 1e-6
_RENORM_THRESHOLD = 1e-12


class RiskguardError(ValueError):
    """Base class for every validation error raised by the package."""


class NegativeEntry(RiskguardError):
    pass


class SumOutOfTolerance(RiskguardError):
    pass


class SizeMismatch(RiskguardError):
    pass


class DimensionMismatch(RiskguardError):
    pass


class AlphaOutOfRange(RiskguardError):
    pass


class EmptyInput(RiskguardError):
    pass


@dataclass(frozen=True)
class ProbVector:
    """A point on the probability simplex over labels ``0..K-1``."""

    probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.probs) < 2:
            raise DimensionMismatch("a probability vector needs at least 2 labels")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.probs, dtype=float)

    def __len__(self) -> int:
        return len(self.probs)

    def __getitem__(self, y: int) -> float:
        return self.probs[y]


def make_prob_vector(raw: Sequence[float]) -> ProbVector:
    """Validate ``raw`` and return it as a normalized :class:`ProbVector`.

    Entries must be non-negative and sum to one within ``1e-6``. Inputs
    already summing to one within ``1e-12`` are kept bit-for-bit, which makes
    serialization round trips lossless.
    """
    values = [float(v) for v in raw]
    if any(math.isnan(v) for v in values):
        raise NegativeEntry("NaN entry in probability vector")
    if any(v < 0 for v in values):
        raise NegativeEntry(f"negative entry in probability vector: {min(values)}")
    total = math.fsum(values)
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise SumOutOfTolerance(f"probabilities sum to {total!r}")
    if abs(total - 1.0) > _RENORM_THRESHOLD:
        values = [v / total for v in values]
    return ProbVector(tuple(values))


@dataclass(frozen=True)
class Example:
    """One classification instance with cloud (reference) and edge distributions."""

    id: int
    cloud_dist: ProbVector
    edge_dist: ProbVector
    features: tuple[float, ...] = ()
    label: int | None = None

    def __post_init__(self):
        if len(self.cloud_dist) != len(self.edge_dist):
            raise DimensionMismatch("cloud and edge distributions differ in size")
        if self.label is not None and not 0 <= self.label < len(self.cloud_dist):
            raise DimensionMismatch(f"label {self.label} outside label space")


@dataclass(frozen=True)
class MultiLabelExample:
    """A segmentation-style instance: per-item scores and the positive items."""

    id: int
    item_scores: tuple[float, ...]
    positives: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if any(not 0.0 <= s <= 1.0 for s in self.item_scores):
            raise RiskguardError("item scores must lie in [0, 1]")
        if any(not 0 <= p < len(self.item_scores) for p in self.positives):
            raise DimensionMismatch("positive item index out of range")


# Prediction sets are plain frozensets of label (or item) indices.
PredictionSet = frozenset


@dataclass(frozen=True)
class SplitPlan:
    """Ordered mapping ``role -> size``; roles are filled in declaration order."""

    sizes: Mapping[str, int]

    def __post_init__(self):
        if any(int(n) < 0 for n in self.sizes.values()):
            raise SizeMismatch("split sizes must be non-negative")

    @property
    def total(self) -> int:
        return sum(int(n) for n in self.sizes.values())


class RandomnessContract:
    """Counter-based stream derivation from a master seed.

    ``stream(i)`` is a Philox generator keyed by ``(master_seed, i)``, so the
    draws depend only on that pair and never on execution order.
    """

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed) & (2**64 - 1)

    def stream(self, i: int) -> np.random.Generator:
        key = (int(i) & (2**64 - 1)) << 64 | self.master_seed
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self):
        return f"RandomnessContract(master_seed={self.master_seed})"


def stream(master_seed: int, i: int) -> np.random.Generator:
    return RandomnessContract(master_seed).stream(i)


def split_dataset(examples: Sequence, plan: SplitPlan, rng: np.random.Generator) -> dict[str, list]:
    """Shuffle ``examples`` with ``rng`` and cut them into the plan's roles."""
    if plan.total != len(examples):
        raise SizeMismatch(f"plan covers {plan.total} examples, got {len(examples)}")
    order = rng.permutation(len(examples))
    out, start = {}, 0
    for role, size in plan.sizes.items():
        out[role] = [examples[j] for j in order[start:start + int(size)]]
        start += int(size)
    return out


def check_alpha(alpha: float, name: str = "alpha") -> float:
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(f"{name} must lie in (0, 1), got {alpha}")
    return alpha
