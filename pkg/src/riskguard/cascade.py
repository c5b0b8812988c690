"""Edge/cloud cascading with conformal alignment screening.

Each input gets an edge prediction set. Its alignment score is the cloud
probability mass the set covers; inputs whose predicted alignment is high
enough stay on the edge and the rest are deferred to the cloud. The stopping
rule for the sequential screen keeps the estimated false discovery
proportion of the kept set at or below ``delta``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .core import ProbVector, RiskguardError, check_alpha


class EmptyTraining(RiskguardError):
    pass


def alignment_score(p_star, edge_set) -> float:
    """Cloud probability mass covered by ``edge_set``."""
    p = p_star.array if isinstance(p_star, ProbVector) else np.asarray(p_star, dtype=float)
    idx = sorted(int(y) for y in edge_set)
    return float(p[idx].sum()) if idx else 0.0


def alignment_scores(p_star: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise :func:`alignment_score` for boolean set masks."""
    return np.where(mask, p_star, 0.0).sum(axis=1)


def pava(y: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Weighted pool-adjacent-violators for a non-decreasing fit.

    Returns the block values and the block sizes (in input order).
    """
    values: list[float] = []
    weights: list[float] = []
    sizes: list[int] = []
    for yi, wi in zip(y, w):
        values.append(float(yi))
        weights.append(float(wi))
        sizes.append(1)
        while len(values) > 1 and values[-2] > values[-1]:
            w_new = weights[-2] + weights[-1]
            v_new = (values[-2] * weights[-2] + values[-1] * weights[-1]) / w_new
            s_new = sizes[-2] + sizes[-1]
            del values[-1], weights[-1], sizes[-1]
            values[-1], weights[-1], sizes[-1] = v_new, w_new, s_new
    return np.array(values), np.array(sizes)


@dataclass(frozen=True)
class IsotonicPredictor:
    """Right-continuous non-decreasing step function.

    ``knots[i]`` is the smallest training feature in step ``i``; inputs
    below the first knot take the first step value.
    """

    knots: np.ndarray
    values: np.ndarray

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        idx = np.searchsorted(self.knots, u, side="right") - 1
        return self.values[np.clip(idx, 0, len(self.values) - 1)]


def fit_isotonic(u, c_star) -> IsotonicPredictor:
    """Isotonic regression of ``c_star`` on ``u``; tied features are pooled first."""
    u = np.asarray(u, dtype=float).ravel()
    c = np.asarray(c_star, dtype=float).ravel()
    if u.size == 0:
        raise EmptyTraining("isotonic fit needs at least one pair")
    if u.size != c.size:
        raise RiskguardError("features and targets differ in length")
    xs, inverse, counts = np.unique(u, return_inverse=True, return_counts=True)
    means = np.bincount(inverse, weights=c) / counts
    values, sizes = pava(means, counts.astype(float))
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    return IsotonicPredictor(xs[starts], np.clip(values, 0.0, 1.0))


class AlignmentPredictor(Protocol):
    def fit(self, u: np.ndarray, c_star: np.ndarray, rng: np.random.Generator) -> Callable[[np.ndarray], np.ndarray]:
        ...


class IsotonicAlignment:
    name = "isotonic"

    def fit(self, u, c_star, rng=None):
        return fit_isotonic(u, c_star)


class RandomAlignment:
    """Ignores its input; predictions are uniform draws from the trial stream."""

    name = "random"

    def fit(self, u, c_star, rng):
        return lambda x: rng.random(np.shape(x))


PREDICTORS = {"isotonic": IsotonicAlignment, "random": RandomAlignment}


def get_predictor(name: str) -> AlignmentPredictor:
    try:
        return PREDICTORS[name]()
    except KeyError:
        raise RiskguardError(f"unknown alignment predictor {name!r}") from None


def fdp_estimate(n_te, n_val, unscreened_val_misaligned, unscreened_te):
    """Estimated false discovery proportion of the unscreened test inputs (0/0 = 0)."""
    n_te = np.asarray(n_te, dtype=float)
    num = (n_te / (1.0 + np.asarray(n_val, dtype=float))) * (1.0 + np.asarray(unscreened_val_misaligned, dtype=float))
    den = np.asarray(unscreened_te, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def screen_arrays(val_c_hat, val_misaligned, test_c_hat, delta: float,
                  val_ids=None, test_ids=None) -> tuple[np.ndarray, np.ndarray, int, np.ndarray]:
    """Core of the screening procedure on plain arrays.

    Returns ``(order, trajectory, k_ca, selected)``: the pooled sort order
    (validation indices first, test indices offset by ``n_val``), the FDP
    estimate after screening ``k = 0..N`` records, the stopping index and a
    boolean mask over test records. The stopping index is the first
    admissible ``k`` whose estimate is at most ``delta``; ``k`` is admissible
    when it does not split a run of equal ``C_hat`` values.
    """
    val_c_hat = np.asarray(val_c_hat, dtype=float)
    test_c_hat = np.asarray(test_c_hat, dtype=float)
    mis = np.asarray(val_misaligned, dtype=bool)
    n_val, n_te = len(val_c_hat), len(test_c_hat)
    ids = np.concatenate([np.arange(n_val) if val_ids is None else np.asarray(val_ids),
                          np.arange(n_te) if test_ids is None else np.asarray(test_ids)])
    role = np.concatenate([np.zeros(n_val, int), np.ones(n_te, int)])
    c_hat = np.concatenate([val_c_hat, test_c_hat])
    order = np.lexsort((ids, role, c_hat))
    is_test = role[order] == 1
    mis_sorted = np.concatenate([mis, np.zeros(n_te, bool)])[order]
    screened_te = np.concatenate([[0], np.cumsum(is_test)])
    screened_mis = np.concatenate([[0], np.cumsum(mis_sorted)])
    traj = fdp_estimate(n_te, n_val, mis.sum() - screened_mis, n_te - screened_te)
    traj = np.atleast_1d(traj)
    # stopping inside a block of tied C_hat would screen tied validation
    # records ahead of their test twins and break exchangeability, so only
    # block boundaries are admissible; k = N always is (estimate 0)
    c_sorted = c_hat[order]
    admissible = np.ones(len(traj), bool)
    admissible[1:-1] = c_sorted[:-1] < c_sorted[1:]
    k_ca = int(np.flatnonzero(admissible & (traj <= delta))[0])
    selected = np.zeros(n_te, bool)
    kept = order[k_ca:]
    selected[kept[kept >= n_val] - n_val] = True
    return order, traj, k_ca, selected


@dataclass(frozen=True)
class AlignmentRecord:
    id: int
    u: float
    c_hat: float
    c_star: float | None = None

    def __post_init__(self):
        for name in ("u", "c_hat", "c_star"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise RiskguardError(f"{name} must lie in [0, 1]")


@dataclass
class ScreeningLedger:
    """Pooled ranking, FDP trajectory, stopping index and selected test ids."""

    pooled: list[tuple[str, AlignmentRecord]]
    trajectory: np.ndarray
    k_ca: int
    selected: frozenset = field(default_factory=frozenset)


def conformal_alignment_screen(val_records: Sequence[AlignmentRecord], test_records: Sequence[AlignmentRecord],
                               alpha_label_mis: float, delta: float) -> ScreeningLedger:
    alpha = check_alpha(alpha_label_mis, "alpha_label_mis")
    if not 0.0 < delta < 1.0:
        raise RiskguardError("delta must lie in (0, 1)")
    if any(r.c_star is None for r in val_records):
        raise RiskguardError("validation records need c_star")
    mis = np.array([r.c_star < 1.0 - alpha for r in val_records], dtype=bool)
    order, traj, k_ca, selected = screen_arrays(
        [r.c_hat for r in val_records], mis, [r.c_hat for r in test_records], delta,
        [r.id for r in val_records], [r.id for r in test_records])
    n_val = len(val_records)
    pooled = [("val", val_records[j]) if j < n_val else ("test", test_records[j - n_val]) for j in order]
    chosen = frozenset(test_records[j].id for j in np.flatnonzero(selected))
    return ScreeningLedger(pooled, traj, k_ca, chosen)


def confidence_based_deferral(confidences, tau_def: float) -> np.ndarray:
    """Boolean deferral mask: defer when the edge top-1 confidence is below ``tau_def``."""
    conf = np.asarray(confidences, dtype=float)
    if np.any((conf < 0) | (conf > 1)):
        raise RiskguardError("confidences must lie in [0, 1]")
    return conf < tau_def


@dataclass(frozen=True)
class CascadeOutcome:
    edge_mask: np.ndarray
    satisfaction_rate: float
    deferral_rate: float
    normalized_inefficiency: float
    fdp: float


def cascade_metrics(edge_mask, c_star_assigned, set_sizes, cloud_sizes, alpha_label_mis: float) -> CascadeOutcome:
    """Satisfaction, deferral and normalized inefficiency of a cascade assignment.

    ``c_star_assigned`` and ``set_sizes`` describe the set actually served to
    each test input (the edge set when kept, the cloud set when deferred).
    """
    edge = np.asarray(edge_mask, dtype=bool)
    c_star = np.asarray(c_star_assigned, dtype=float)
    sizes = np.asarray(set_sizes, dtype=float)
    cloud = np.asarray(cloud_sizes, dtype=float)
    if np.any(cloud < 1):
        raise RiskguardError("cloud sets must be non-empty")
    n_te = len(edge)
    if n_te == 0:
        raise RiskguardError("no test inputs")
    n_sel = int(edge.sum())
    good = int((edge & (c_star >= 1.0 - alpha_label_mis)).sum())
    sat = good / n_sel if n_sel else 0.0
    fdp = (n_sel - good) / n_sel if n_sel else 0.0
    return CascadeOutcome(edge, sat, 1.0 - n_sel / n_te, float(np.mean(sizes / cloud)), fdp)
