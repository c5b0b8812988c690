"""Conformalized credal inference: divergence balls around an edge distribution.

The ball ``{q : D(q || p_edge) <= tau}`` is sized on calibration pairs
``(p_star, p_edge)`` so that it contains the reference distribution with the
requested probability. Per-class bounds and single-distribution summaries
are computed over a discrete representation of the simplex.
"""

from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .conformal import conformal_rank
from .core import (DimensionMismatch, ProbVector, RandomnessContract, RiskguardError, check_alpha,
                   make_prob_vector)

BOX_TOL = 1e-9


class EmptyCalibration(RiskguardError):
    pass


class InconsistentBox(RiskguardError):
    pass


@dataclass(frozen=True)
class DivergenceSpec:
    """Order of the alpha-divergence; 1 gives ``KL(q||p)``, 0 gives ``KL(p||q)``."""

    alpha_order: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.alpha_order):
            raise RiskguardError("alpha_order must be finite")


@dataclass(frozen=True)
class CredalBall:
    center: ProbVector
    tau_div: float
    spec: DivergenceSpec = DivergenceSpec()

    def __post_init__(self):
        if not self.tau_div >= 0:
            raise RiskguardError("credal radius must be non-negative")


def _as_array(v) -> np.ndarray:
    return v.array if isinstance(v, ProbVector) else np.asarray(v, dtype=float)


def _kl_terms(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # a log(a/b) with 0 log 0 = 0 and a > 0, b = 0 -> inf
    with np.errstate(divide="ignore", invalid="ignore"):
        t = a * np.log(a / b)
    t = np.where(a > 0, t, 0.0)
    return np.where((a > 0) & (b == 0), np.inf, t)


def divergence(q, p, alpha_order: float) -> np.ndarray:
    """Alpha-divergence ``D(q || p)`` along the last axis (broadcasting).

    For ``alpha`` outside {0, 1} the sum is written as
    ``sum_y p_y ((q_y/p_y)^alpha - 1) / (alpha(alpha-1))`` which is exactly 0
    at ``q = p``. Support mismatches give ``+inf`` where the integrand blows up.
    """
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    if q.shape[-1] != p.shape[-1]:
        raise DimensionMismatch("distributions differ in size")
    a = float(alpha_order)
    if a == 1.0:
        out = _kl_terms(q, p).sum(axis=-1)
    elif a == 0.0:
        out = _kl_terms(p, q).sum(axis=-1)
    else:
        q, p = np.broadcast_arrays(q, p)
        both = (q > 0) & (p > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(both, p * np.expm1(a * np.log(q / p)), 0.0)
        t = np.where((q == 0) & (p > 0), -p if a > 0 else np.inf, t)
        t = np.where((p == 0) & (q > 0), 0.0 if a < 1 else np.inf, t)
        out = t.sum(axis=-1) / (a * (a - 1.0))
    return np.maximum(out, 0.0)


def alpha_divergence(q, p, spec: DivergenceSpec) -> float:
    q, p = _as_array(q), _as_array(p)
    if q.shape != p.shape:
        raise DimensionMismatch("distributions differ in size")
    return float(divergence(q, p, spec.alpha_order))


def divergence_to_centers(points: np.ndarray, centers: np.ndarray, alpha_order: float,
                          chunk: int = 256) -> np.ndarray:
    """``D(points[j] || centers[i])`` as an ``[n_centers, n_points]`` matrix."""
    points = np.asarray(points, dtype=float)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    a = float(alpha_order)
    if np.all(centers > 0) and a != 0.0:
        # fast path: strictly positive centers turn the sum into a matrix product
        log_c = np.log(centers)
        if a == 1.0:
            with np.errstate(divide="ignore", invalid="ignore"):
                self_term = np.where(points > 0, points * np.log(points), 0.0).sum(axis=1)
            out = self_term[None, :] - log_c @ points.T
        else:
            with np.errstate(divide="ignore"):
                qa = np.where(points > 0, points ** a, 0.0 if a > 0 else np.inf)
            out = (np.exp((1.0 - a) * log_c) @ qa.T - 1.0) / (a * (a - 1.0))
        return np.maximum(np.nan_to_num(out, nan=np.inf), 0.0)
    rows = [divergence(points[None, :, :], centers[i:i + chunk, None, :], a)
            for i in range(0, len(centers), chunk)]
    return np.vstack(rows) if rows else np.zeros((0, len(points)))


def cdci_offline(cal_pairs: Sequence[tuple], spec: DivergenceSpec, alpha_dist_mis: float) -> float:
    """Conformal radius: the ``ceil((1+n)(1-alpha))``-th smallest calibration divergence."""
    alpha = check_alpha(alpha_dist_mis, "alpha_dist_mis")
    if len(cal_pairs) == 0:
        raise EmptyCalibration("credal calibration needs at least one pair")
    p_star = np.array([_as_array(a) for a, _ in cal_pairs])
    p_edge = np.array([_as_array(b) for _, b in cal_pairs])
    return cdci_threshold(divergence(p_star, p_edge, spec.alpha_order), alpha)


def cdci_threshold(scores, alpha: float) -> float:
    v = np.sort(np.asarray(scores, dtype=float))
    k = conformal_rank(len(v), alpha)
    return math.inf if k > len(v) else float(v[max(k, 1) - 1])


def credal_membership(q, ball: CredalBall) -> bool:
    if math.isinf(ball.tau_div):
        if len(_as_array(q)) != len(ball.center):
            raise DimensionMismatch("distributions differ in size")
        return True
    return alpha_divergence(q, ball.center, ball.spec) <= ball.tau_div


class SamplerMode(enum.Enum):
    GRID = "grid"
    RANDOM = "random"


def simplex_lattice(k: int, g: int) -> np.ndarray:
    """All points ``(n_1, ..., n_k)/g`` with non-negative integers summing to ``g``.

    Stars and bars: each choice of ``k-1`` bar positions among ``g+k-1``
    slots gives one composition of ``g``.
    """
    if k < 1 or g < 1:
        raise RiskguardError("lattice needs k >= 1 and g >= 1")
    bars = np.array(list(itertools.combinations(range(g + k - 1), k - 1)), dtype=np.int64)
    bars = bars.reshape(-1, k - 1)
    edges = np.hstack([np.full((len(bars), 1), -1), bars, np.full((len(bars), 1), g + k - 1)])
    return (np.diff(edges, axis=1) - 1) / g


@dataclass(frozen=True)
class SimplexSampler:
    """Discrete representation of the simplex.

    ``grid`` enumerates the lattice of step ``1/grid_size``; ``random`` draws
    ``count`` uniform Dirichlet points from a seeded stream.
    """

    mode: SamplerMode = SamplerMode.GRID
    grid_size: int = 100
    count: int = 20000
    seed: int = 0

    @classmethod
    def grid(cls, grid_size: int = 100) -> "SimplexSampler":
        return cls(SamplerMode.GRID, grid_size=int(grid_size))

    @classmethod
    def random(cls, count: int = 20000, seed: int = 0) -> "SimplexSampler":
        return cls(SamplerMode.RANDOM, count=int(count), seed=int(seed))

    @classmethod
    def default_for(cls, k: int) -> "SimplexSampler":
        return cls.grid() if k <= 4 else cls.random()

    def points(self, k: int) -> np.ndarray:
        if self.mode is SamplerMode.GRID:
            return _cached_lattice(k, self.grid_size)
        return RandomnessContract(self.seed).stream(k).dirichlet(np.ones(k), size=self.count)


_LATTICES: dict[tuple[int, int], np.ndarray] = {}


def _cached_lattice(k: int, g: int) -> np.ndarray:
    key = (k, g)
    if key not in _LATTICES:
        pts = simplex_lattice(k, g)
        pts.setflags(write=False)
        _LATTICES[key] = pts
    return _LATTICES[key]


@dataclass(frozen=True)
class BoundsBox:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        if lo.shape != hi.shape:
            raise DimensionMismatch("bounds differ in size")
        if np.any(lo < -BOX_TOL) or np.any(hi > 1 + BOX_TOL) or np.any(lo > hi + BOX_TOL):
            raise InconsistentBox("bounds must satisfy 0 <= lower <= upper <= 1")


def in_ball_candidates(ball: CredalBall, sampler: SimplexSampler) -> np.ndarray:
    """Center first, then every sampler point inside the ball, in sampler order."""
    center = ball.center.array
    pts = sampler.points(len(center))
    if math.isinf(ball.tau_div):
        inside = pts
    else:
        d = divergence_to_centers(pts, center[None, :], ball.spec.alpha_order)[0]
        inside = pts[d <= ball.tau_div]
    return np.vstack([center[None, :], inside])


def credal_bounds(ball: CredalBall, sampler: SimplexSampler) -> BoundsBox:
    cand = in_ball_candidates(ball, sampler)
    return BoundsBox(tuple(cand.min(axis=0)), tuple(cand.max(axis=0)))


def intersection_probability(box: BoundsBox) -> ProbVector:
    lo, hi = np.asarray(box.lower, dtype=float), np.asarray(box.upper, dtype=float)
    if lo.sum() > 1 + BOX_TOL or hi.sum() < 1 - BOX_TOL:
        raise InconsistentBox("box does not contain a distribution")
    width = (hi - lo).sum()
    if width <= 0:
        return make_prob_vector(lo)
    b = (1.0 - lo.sum()) / width
    return make_prob_vector(np.clip(lo + b * (hi - lo), 0.0, None))


class ExtractionRule(enum.Enum):
    INTERSECTION = "intersection"
    MAX_ENTROPY = "maxentropy"
    ENSEMBLE = "ensemble"


def shannon_entropy(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def extract_distribution(ball: CredalBall, sampler: SimplexSampler, rule: ExtractionRule) -> ProbVector:
    if rule is ExtractionRule.INTERSECTION:
        return intersection_probability(credal_bounds(ball, sampler))
    cand = in_ball_candidates(ball, sampler)
    if rule is ExtractionRule.MAX_ENTROPY:
        h = shannon_entropy(cand)
        # ties within round-off go to the first candidate
        return make_prob_vector(cand[int(np.flatnonzero(h >= h.max() - 1e-12)[0])])
    mean = cand.mean(axis=0)
    return make_prob_vector(mean / mean.sum())


def hard_decision(q) -> int:
    return int(np.argmax(_as_array(q)))


def credal_coverage_and_inefficiency(test_pairs: Sequence[tuple], ball_builder: Callable[[ProbVector], CredalBall],
                                     sampler: SimplexSampler) -> tuple[float, float]:
    """Fraction of test references inside their ball, and the mean in-ball sampler fraction."""
    if len(test_pairs) == 0:
        raise RiskguardError("no test pairs")
    covered, frac = 0, 0.0
    for p_star, p_edge in test_pairs:
        ball = ball_builder(p_edge if isinstance(p_edge, ProbVector) else make_prob_vector(p_edge))
        covered += credal_membership(p_star, ball)
        pts = sampler.points(len(ball.center))
        if math.isinf(ball.tau_div):
            frac += 1.0
        else:
            d = divergence_to_centers(pts, ball.center.array[None, :], ball.spec.alpha_order)[0]
            frac += float(np.mean(d <= ball.tau_div))
    n = len(test_pairs)
    return covered / n, frac / n


def coverage_and_inefficiency_batch(p_star: np.ndarray, p_edge: np.ndarray, tau: float,
                                    spec: DivergenceSpec, sampler: SimplexSampler) -> tuple[float, float]:
    """Array form of :func:`credal_coverage_and_inefficiency` for a shared radius."""
    p_star, p_edge = np.asarray(p_star, dtype=float), np.asarray(p_edge, dtype=float)
    if len(p_star) == 0:
        raise RiskguardError("no test pairs")
    if math.isinf(tau):
        return 1.0, 1.0
    coverage = float(np.mean(divergence(p_star, p_edge, spec.alpha_order) <= tau))
    pts = sampler.points(p_edge.shape[1])
    d = divergence_to_centers(pts, p_edge, spec.alpha_order)
    return coverage, float(np.mean(d <= tau))
