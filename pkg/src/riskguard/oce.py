"""Set losses, OCE cost functions and the convex search over the OCE parameter t."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import RiskguardError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
T_TOL = 1e-8


class EmptyLosses(RiskguardError):
    pass


class NonMonotoneRow(RiskguardError):
    pass


class SetLoss(enum.Enum):
    MISCOVERAGE = "miscoverage"
    FNR = "fnr"


@dataclass(frozen=True)
class CostFunction:
    """OCE cost ``psi``: ``average``, ``entropic`` (zeta > 0) or ``cvar`` (0 <= zeta < 1)."""

    kind: str = "average"
    zeta: float = 0.0

    def __post_init__(self):
        if self.kind not in ("average", "entropic", "cvar"):
            raise RiskguardError(f"unknown cost function {self.kind!r}")
        if self.kind == "entropic" and not self.zeta > 0:
            raise RiskguardError("entropic risk needs zeta > 0")
        if self.kind == "cvar" and not 0.0 <= self.zeta < 1.0:
            raise RiskguardError("CVaR needs zeta in [0, 1)")

    @classmethod
    def average(cls) -> "CostFunction":
        return cls("average", 0.0)

    @classmethod
    def entropic(cls, zeta: float) -> "CostFunction":
        return cls("entropic", float(zeta))

    @classmethod
    def cvar(cls, zeta: float) -> "CostFunction":
        return cls("cvar", float(zeta))

    def psi(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "average":
            return u
        if self.kind == "entropic":
            return np.expm1(self.zeta * u) / self.zeta
        return np.maximum(u, 0.0) / (1.0 - self.zeta)

    def __str__(self):
        return self.kind if self.kind == "average" else f"{self.kind}({self.zeta:g})"


def set_loss(loss: SetLoss, truth, prediction_set) -> float:
    members = set(prediction_set)
    if loss is SetLoss.MISCOVERAGE:
        return 0.0 if int(truth) in members else 1.0
    positives = set(truth)
    if not positives:
        return 0.0
    return 1.0 - len(positives & members) / len(positives)


def nested_set(scores: Sequence[float], lam: float) -> frozenset:
    """``{y : score(y) >= 1 - lam}``."""
    s = np.asarray(scores, dtype=float)
    return frozenset(int(y) for y in np.flatnonzero(s >= 1.0 - lam))


def _weights(n: int, weights) -> np.ndarray | None:
    if weights is None:
        return None
    w = np.asarray(weights, dtype=float)
    if w.shape[0] != n:
        raise RiskguardError("weights and losses differ in length")
    return w / w.sum()


def oce_objective(losses, t: float, cost: CostFunction, weights=None) -> float:
    """``t + mean(psi(loss - t))`` (weighted mean when ``weights`` is given)."""
    ell = np.asarray(losses, dtype=float).ravel()
    if ell.size == 0:
        raise EmptyLosses("no losses to average")
    w = _weights(ell.size, weights)
    vals = cost.psi(ell - t)
    return float(t + (vals.mean() if w is None else vals @ w))


def golden_section(fun: Callable[[np.ndarray], np.ndarray], lo, hi, tol: float = T_TOL) -> np.ndarray:
    """Vectorized golden-section search; minimizes ``fun`` independently per entry."""
    a = np.array(lo, dtype=float, ndmin=1)
    b = np.array(hi, dtype=float, ndmin=1)
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fun(c), fun(d)
    while np.any(b - a > tol):
        left = fc <= fd  # keep [a, d]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - GOLDEN * (b - a)
        new_d = a + GOLDEN * (b - a)
        # one of the interior points is reused; the other gets a fresh eval
        c_next = np.where(left, new_c, d)
        d_next = np.where(left, c, new_d)
        f_fresh = fun(np.where(left, c_next, d_next))
        fc, fd = np.where(left, f_fresh, fd), np.where(left, fc, f_fresh)
        c, d = c_next, d_next
    return (a + b) / 2.0


def _column_objective(L: np.ndarray, cost: CostFunction, w: np.ndarray | None):
    def fun(t):
        vals = cost.psi(L - t[None, :])
        return t + (vals.mean(axis=0) if w is None else w @ vals)
    return fun


def optimize_t_columns(L: np.ndarray, cost: CostFunction, weights=None) -> np.ndarray:
    """Minimizer of the empirical OCE objective for every column of ``L``."""
    L = np.asarray(L, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    if L.shape[0] == 0:
        raise EmptyLosses("no losses to optimize over")
    if cost.kind == "average":
        return np.zeros(L.shape[1])
    w = _weights(L.shape[0], weights)
    return golden_section(_column_objective(L, cost, w), L.min(axis=0), L.max(axis=0))


def oce_risk_columns(L: np.ndarray, cost: CostFunction, weights=None) -> tuple[np.ndarray, np.ndarray]:
    L = np.asarray(L, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    if L.shape[0] == 0:
        raise EmptyLosses("no losses to evaluate")
    w = _weights(L.shape[0], weights)
    if cost.kind == "average":
        mean = L.mean(axis=0) if w is None else w @ L
        return mean, np.zeros(L.shape[1])
    t = optimize_t_columns(L, cost, weights)
    return _column_objective(L, cost, w)(t), t


def oce_risk_histogram(values, weights, cost: CostFunction) -> tuple[np.ndarray, np.ndarray]:
    """OCE risk of discrete laws sharing the support ``values``.

    ``weights[v, c]`` is the mass of ``values[v]`` under law ``c``; columns
    need not be normalized. Returns ``(risk, t)`` per column.
    """
    v = np.asarray(values, dtype=float).ravel()
    W = np.asarray(weights, dtype=float).reshape(v.size, -1)
    mass = W.sum(axis=0)
    if v.size == 0 or np.any(mass <= 0):
        raise EmptyLosses("every law needs positive mass")
    P = W / mass[None, :]
    if cost.kind == "average":
        return v @ P, np.zeros(P.shape[1])

    def fun(t):
        return t + (cost.psi(v[:, None] - t[None, :]) * P).sum(axis=0)

    support = P > 0
    lo = np.where(support, v[:, None], np.inf).min(axis=0)
    hi = np.where(support, v[:, None], -np.inf).max(axis=0)
    t = golden_section(fun, lo, hi)
    return fun(t), t


def oce_risk(losses, cost: CostFunction, weights=None) -> tuple[float, float]:
    """Empirical OCE risk ``inf_t {t + E psi(loss - t)}`` and its minimizer."""
    ell = np.asarray(losses, dtype=float).ravel()
    risk, t = oce_risk_columns(ell[:, None], cost, weights)
    return float(risk[0]), float(t[0])


def optimize_t(opt_losses, cost: CostFunction) -> float:
    """OCE parameter fitted on held-out optimization losses at a fixed lambda."""
    ell = np.asarray(opt_losses, dtype=float).ravel()
    return float(optimize_t_columns(ell[:, None], cost)[0])


def check_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=float).ravel()
    if g.size == 0 or np.any(np.diff(g) <= 0):
        raise RiskguardError("lambda grid must be non-empty and strictly ascending")
    return g


def default_lambda_grid(step: float = 0.001) -> np.ndarray:
    return np.round(np.arange(0.0, 1.0 + step / 2, step), 12)


def missed_count_matrix(elem_scores: np.ndarray, owner: np.ndarray, n_owners: int, grid) -> np.ndarray:
    """Number of each owner's truth elements left out of the nested sets.

    ``elem_scores[k]`` is the score of truth element ``k`` belonging to example
    ``owner[k]``; an element is out of the set at ``lam`` when its score is
    below ``1 - lam``.
    """
    grid = check_grid(grid)
    # element is missed at grid index j iff j < first_in
    first_in = first_inclusion_index(elem_scores, grid)
    flat = np.asarray(owner, dtype=np.int64) * (grid.size + 1) + first_in
    hist = np.bincount(flat, minlength=n_owners * (grid.size + 1)).reshape(n_owners, grid.size + 1)
    return np.cumsum(hist[:, ::-1], axis=1)[:, ::-1][:, 1:]


def first_inclusion_index(scores, grid: np.ndarray) -> np.ndarray:
    """Smallest grid index ``j`` with ``score >= 1 - grid[j]`` (``grid.size`` if none)."""
    neg_thr = -(1.0 - grid)  # ascending
    return np.searchsorted(neg_thr, -np.asarray(scores, dtype=float), side="left")


def missed_fraction_matrix(elem_scores: np.ndarray, owner: np.ndarray, owner_sizes: np.ndarray,
                           grid) -> np.ndarray:
    """Fraction of each owner's truth elements missed; owners with no truth elements get 0."""
    sizes = np.asarray(owner_sizes, dtype=float)
    missed = missed_count_matrix(elem_scores, owner, len(sizes), grid)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sizes[:, None] > 0, missed / sizes[:, None], 0.0)


def losses_along_lambda(scores: Sequence[Sequence[float]], truths: Sequence, loss: SetLoss,
                        lambda_grid) -> np.ndarray:
    """Loss matrix ``[example, lambda]`` for the sets ``{y : score >= 1 - lambda}``."""
    elem, owner, sizes = [], [], []
    for i, (s, truth) in enumerate(zip(scores, truths)):
        s = np.asarray(s, dtype=float)
        idx = [int(truth)] if loss is SetLoss.MISCOVERAGE else sorted(int(y) for y in truth)
        elem.extend(s[idx])
        owner.extend([i] * len(idx))
        sizes.append(len(idx))
    L = missed_fraction_matrix(np.array(elem), np.array(owner, dtype=int), np.array(sizes), lambda_grid)
    check_monotone(L)
    return L


def fnr_loss_matrix(item_scores: np.ndarray, positives: np.ndarray, lambda_grid) -> np.ndarray:
    """FNR losses for fixed-width multi-label batches (``positives`` is a bool mask)."""
    item_scores = np.asarray(item_scores, dtype=float)
    positives = np.asarray(positives, dtype=bool)
    rows, cols = np.nonzero(positives)
    return missed_fraction_matrix(item_scores[rows, cols], rows, positives.sum(axis=1), lambda_grid)


def miscoverage_loss_matrix(probs: np.ndarray, labels: np.ndarray, lambda_grid) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    return missed_fraction_matrix(probs[np.arange(n), labels], np.arange(n), np.ones(n), lambda_grid)


def check_monotone(L: np.ndarray) -> None:
    if L.shape[1] > 1 and np.any(np.diff(L, axis=1) > 1e-12):
        bad = int(np.flatnonzero((np.diff(L, axis=1) > 1e-12).any(axis=1))[0])
        raise NonMonotoneRow(f"loss row {bad} increases along the lambda grid")
