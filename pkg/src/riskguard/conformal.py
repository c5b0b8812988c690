"""Split conformal prediction, localized conformal prediction and highest-mass sets.

Scalar entry points (``cp_quantile``, ``cp_set``, ``hms``, ``lcp_quantile``)
mirror the per-example operations; the ``*_mask`` / ``lcp_quantiles``
variants do the same work for a whole batch and are what the harness uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import DimensionMismatch, RiskguardError, check_alpha

# slack used when turning the real-valued rank (1-alpha)(n+1) into an integer
RANK_EPS = 1e-9


def neg_log_prob(probs) -> np.ndarray:
    """Score ``J(x, y) = -log p(y|x)``; zero probability maps to ``+inf``."""
    p = np.asarray(probs, dtype=float)
    with np.errstate(divide="ignore"):
        return -np.log(p)


SCORE_FUNCTIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"neglogprob": neg_log_prob}


def register_score(name: str, fn: Callable[[np.ndarray], np.ndarray]) -> None:
    SCORE_FUNCTIONS[name] = fn


def get_score(score: str | Callable = "neglogprob") -> Callable[[np.ndarray], np.ndarray]:
    if callable(score):
        return score
    try:
        return SCORE_FUNCTIONS[score]
    except KeyError:
        raise RiskguardError(f"unknown score function {score!r}") from None


@dataclass(frozen=True)
class LcpConfig:
    bandwidth: float

    def __post_init__(self):
        if not self.bandwidth > 0:
            raise RiskguardError("LCP bandwidth must be positive")


def conformal_rank(n: int, alpha: float) -> int:
    """``ceil((1 - alpha)(n + 1))``, robust to float noise in the product."""
    return math.ceil((1.0 - alpha) * (n + 1) - RANK_EPS)


def cp_quantile(scores: Sequence[float], alpha: float) -> float:
    """k-th smallest element of ``scores + [inf]`` with ``k = ceil((1-alpha)(n+1))``."""
    alpha = check_alpha(alpha, "alpha_label_mis")
    s = np.sort(np.asarray(scores, dtype=float).ravel())
    k = conformal_rank(len(s), alpha)
    if k > len(s):
        return math.inf
    return float(s[max(k, 1) - 1])


def cp_set(dist, q: float, score="neglogprob") -> frozenset:
    """Labels whose score does not exceed ``q``."""
    j = get_score(score)(np.asarray(dist, dtype=float))
    return frozenset(int(y) for y in np.flatnonzero(j <= q))


def cp_mask(probs: np.ndarray, q, score="neglogprob") -> np.ndarray:
    """Batch form of :func:`cp_set`; ``q`` is a scalar or one threshold per row."""
    j = get_score(score)(np.asarray(probs, dtype=float))
    q = np.asarray(q, dtype=float)
    if q.ndim == 1:
        q = q[:, None]
    return j <= q


def hms_mask(probs: np.ndarray, target_mass: float) -> np.ndarray:
    """Highest-mass sets for a batch of distributions (rows)."""
    if not 0.0 < target_mass <= 1.0:
        raise RiskguardError(f"target mass must lie in (0, 1], got {target_mass}")
    p = np.atleast_2d(np.asarray(probs, dtype=float))
    order = np.argsort(-p, axis=1, kind="stable")  # ties -> smaller label first
    cum = np.cumsum(np.take_along_axis(p, order, axis=1), axis=1)
    size = np.minimum((cum < target_mass).sum(axis=1) + 1, p.shape[1])
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(p.shape[1])[None, :].repeat(len(p), 0), axis=1)
    return ranks < size[:, None]


def hms(dist, target_mass: float) -> frozenset:
    """Smallest label set with probability at least ``target_mass``."""
    mask = hms_mask(np.asarray(dist, dtype=float)[None, :], target_mass)[0]
    return frozenset(int(y) for y in np.flatnonzero(mask))


def _weighted_quantiles(log_w_cal: np.ndarray, log_w_self: np.ndarray, sorted_idx: np.ndarray,
                        sorted_scores: np.ndarray, alpha: float) -> np.ndarray:
    # rescale so the heaviest atom has weight exactly 1; equal weights then
    # become integers and the rule matches cp_quantile bit-for-bit
    top = np.maximum(log_w_cal.max(axis=1, initial=-np.inf), log_w_self)
    w_cal = np.exp(log_w_cal - top[:, None])
    w_self = np.exp(log_w_self - top)
    total = w_cal.sum(axis=1) + w_self
    cum = np.cumsum(w_cal[:, sorted_idx], axis=1)
    hit = cum >= (1.0 - alpha) * total[:, None] - RANK_EPS
    out = np.full(len(hit), math.inf)
    if hit.shape[1] == 0:
        return out
    first = np.argmax(hit, axis=1)
    found = hit[np.arange(len(hit)), first]
    out[found] = sorted_scores[first[found]]
    return out


def lcp_quantiles(x: np.ndarray, cal_features: np.ndarray, cal_scores: np.ndarray,
                  cfg: LcpConfig, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """Localized thresholds for every row of ``x``.

    Each test point draws one perturbation ``x + h * N(0, I)``; calibration
    scores are weighted by the Gaussian kernel to the perturbed point and the
    test point's own kernel weight sits on a ``+inf`` atom.
    """
    alpha = check_alpha(alpha, "alpha_label_mis")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cal_scores = np.asarray(cal_scores, dtype=float)
    cal_features = np.asarray(cal_features, dtype=float)
    cal_features = cal_features.reshape(len(cal_scores), cal_features.size // max(len(cal_scores), 1)
                                        if len(cal_scores) else x.shape[1])
    if len(cal_scores) and cal_features.shape[1] != x.shape[1]:
        raise DimensionMismatch("test and calibration features differ in dimension")
    h = cfg.bandwidth
    x_tilde = x + h * rng.standard_normal(x.shape)
    d_cal = ((cal_features[None, :, :] - x_tilde[:, None, :]) ** 2).sum(axis=2)
    d_self = ((x - x_tilde) ** 2).sum(axis=1)
    order = np.argsort(cal_scores, kind="stable")
    return _weighted_quantiles(-d_cal / (2 * h * h), -d_self / (2 * h * h), order,
                               cal_scores[order], alpha)


def lcp_quantile(x, cal: Sequence[tuple[Sequence[float], float]], cfg: LcpConfig, alpha: float,
                 rng: np.random.Generator) -> float:
    x = np.asarray(x, dtype=float).ravel()
    feats = np.array([np.asarray(f, dtype=float).ravel() for f, _ in cal])
    feats = feats.reshape(len(cal), -1) if len(cal) else np.zeros((0, x.size))
    scores = np.array([s for _, s in cal], dtype=float)
    if len(cal) and feats.shape[1] != x.size:
        raise DimensionMismatch("test and calibration features differ in dimension")
    return float(lcp_quantiles(x[None, :], feats, scores, cfg, alpha, rng)[0])
