"""Betting-martingale (WSR) upper confidence bounds and OCE lambda selection.

The capital process bets *against* a candidate mean ``R``::

    K_i(R) = prod_{j <= i} (1 - eta_j * (x_j - R))

with ``x_j`` the payoffs rescaled to [0, 1]. ``K_i(R)`` is non-decreasing in
``R``; candidates with ``max_i K_i(R) > 1/delta`` are rejected as too large,
so the smallest rejected ``R`` is an upper confidence bound on the mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RiskguardError
from .oce import CostFunction, check_grid, optimize_t_columns

ELL_MAX = 1.0
_BOUND_TOL = 1e-9


class PayoffOutOfBounds(RiskguardError):
    pass


@dataclass(frozen=True)
class WsrConfig:
    delta: float
    r_grid_resolution: float = 1e-4
    eta_cap: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise RiskguardError("delta must lie in (0, 1)")
        if not 0.0 < self.eta_cap < 1.0:
            raise RiskguardError("eta_cap must lie in (0, 1)")
        if not self.r_grid_resolution > 0:
            raise RiskguardError("r_grid_resolution must be positive")


@dataclass
class RcpsResult:
    lambda_hat: float | None
    t_used: float
    ucb_trace: list[tuple[float, float]] = field(default_factory=list)


def betting_fractions(x: np.ndarray, delta: float, eta_cap: float) -> np.ndarray:
    """Predictable bet sizes from running moments with priors 1/2 and 1/4.

    ``x`` has one sequence per column; row ``j`` only uses rows ``< j``.
    """
    n = x.shape[0]
    j = np.arange(1, n + 1, dtype=float)[:, None]
    mu = (0.5 + np.cumsum(x, axis=0)) / (j + 1)
    var = (0.25 + np.cumsum((x - mu) ** 2, axis=0)) / (j + 1)
    var_prev = np.vstack([np.full((1, x.shape[1]), 0.25), var[:-1]])
    eta = np.sqrt(2.0 * math.log(1.0 / delta) / (var_prev * j * np.log1p(j)))
    return np.minimum(eta_cap, eta)


def max_log_capital(x: np.ndarray, eta: np.ndarray, r: np.ndarray) -> np.ndarray:
    """``max_i log K_i(r)`` per column (``r`` holds one candidate per column)."""
    log_k = np.cumsum(np.log1p(-eta * (x - r[None, :])), axis=0)
    return log_k.max(axis=0)


def _normalize(V: np.ndarray, v_lo: np.ndarray, v_hi: np.ndarray) -> np.ndarray:
    width = v_hi - v_lo
    x = (V - v_lo[None, :]) / np.where(width > 0, width, 1.0)[None, :]
    if np.any(x < -_BOUND_TOL) or np.any(x > 1 + _BOUND_TOL):
        raise PayoffOutOfBounds("payoff outside [v_lo, v_hi]")
    return np.clip(x, 0.0, 1.0)


def wsr_ucb_columns(V: np.ndarray, v_lo, v_hi, cfg: WsrConfig) -> np.ndarray:
    """WSR upper confidence bound on the mean of every column of ``V``."""
    V = np.asarray(V, dtype=float)
    if V.ndim == 1:
        V = V[:, None]
    m = V.shape[1]
    v_lo = np.broadcast_to(np.asarray(v_lo, dtype=float), (m,)).copy()
    v_hi = np.broadcast_to(np.asarray(v_hi, dtype=float), (m,)).copy()
    if np.any(v_lo > v_hi):
        raise RiskguardError("v_lo must not exceed v_hi")
    out = v_hi.copy()
    degenerate = v_hi <= v_lo
    out[degenerate] = v_lo[degenerate]
    if V.shape[0] == 0:
        return out
    x = _normalize(V, v_lo, v_hi)
    live = ~degenerate
    if not live.any():
        return out
    x = x[:, live]
    eta = betting_fractions(x, cfg.delta, cfg.eta_cap)
    threshold = math.log(1.0 / cfg.delta)
    hi = np.ones(x.shape[1])
    tripped = max_log_capital(x, eta, hi) > threshold
    lo = np.zeros(x.shape[1])
    steps = max(1, math.ceil(math.log2(1.0 / cfg.r_grid_resolution)))
    for _ in range(steps):
        mid = (lo + hi) / 2.0
        trip = max_log_capital(x, eta, mid) > threshold
        hi = np.where(trip, mid, hi)
        lo = np.where(trip, lo, mid)
    r_norm = np.where(tripped, hi, 1.0)
    out[live] = v_lo[live] + (v_hi[live] - v_lo[live]) * r_norm
    return out


def wsr_ucb(payoffs, v_lo: float, v_hi: float, cfg: WsrConfig) -> float:
    """Upper confidence bound (level ``1 - delta``) on the mean of bounded payoffs."""
    v = np.asarray(payoffs, dtype=float).ravel()
    if v_lo > v_hi:
        raise RiskguardError("v_lo must not exceed v_hi")
    return float(wsr_ucb_columns(v[:, None], [v_lo], [v_hi], cfg)[0])


def payoff_bounds(cost: CostFunction, t) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(t, dtype=float)
    return t + cost.psi(0.0 - t), t + cost.psi(ELL_MAX - t)


def _per_lambda_t(t, size: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    return np.broadcast_to(t, (size,)).astype(float) if t.ndim == 0 else t.astype(float)


def oce_rcps_select(cal_loss_matrix, lambda_grid, cost: CostFunction, t, alpha_risk_tol: float,
                    cfg: WsrConfig, block: int = 48) -> RcpsResult:
    """Smallest grid lambda whose UCB, and the UCB of every larger grid lambda, is <= alpha.

    ``t`` is a scalar or one value per grid point. UCBs are evaluated from
    the top of the grid downwards in blocks and the scan stops at the first
    violation; ``ucb_trace`` holds every evaluated ``(lambda, UCB)`` pair in
    descending lambda order.
    """
    grid = check_grid(lambda_grid)
    L = np.asarray(cal_loss_matrix, dtype=float).reshape(-1, grid.size)
    t_all = _per_lambda_t(t, grid.size)
    trace: list[tuple[float, float]] = []
    lambda_hat, t_used = None, float(t_all[-1])
    end = grid.size
    while end > 0:
        start = max(0, end - block)
        cols = slice(start, end)
        tc = t_all[cols]
        v_lo, v_hi = payoff_bounds(cost, tc)
        V = tc[None, :] + cost.psi(L[:, cols] - tc[None, :])
        ucb = wsr_ucb_columns(V, v_lo, v_hi, cfg)
        for j in range(end - start - 1, -1, -1):
            trace.append((float(grid[start + j]), float(ucb[j])))
            if ucb[j] > alpha_risk_tol:
                return RcpsResult(lambda_hat, t_used, trace)
            lambda_hat, t_used = float(grid[start + j]), float(tc[j])
        end = start
    return RcpsResult(lambda_hat, t_used, trace)


def crc_bound(cal_loss_matrix, cost: CostFunction, t) -> np.ndarray:
    """``n/(n+1) * R_cal(lambda, t) + B(lambda, t)/(n+1)`` per grid column."""
    L = np.asarray(cal_loss_matrix, dtype=float)
    n = L.shape[0]
    t = _per_lambda_t(t, L.shape[1])
    _, b = payoff_bounds(cost, t)
    if n == 0:
        return b
    r_cal = t + cost.psi(L - t[None, :]).mean(axis=0)
    return (n * r_cal + b) / (n + 1)


def oce_crc_select(cal_loss_matrix, lambda_grid, cost: CostFunction, t, alpha_risk_tol: float) -> float | None:
    grid = check_grid(lambda_grid)
    L = np.asarray(cal_loss_matrix, dtype=float).reshape(-1, grid.size)
    ok = np.flatnonzero(crc_bound(L, cost, t) <= alpha_risk_tol)
    return float(grid[ok[0]]) if ok.size else None


def fit_t_per_lambda(opt_loss_matrix, cost: CostFunction) -> np.ndarray:
    """``t*(lambda)`` on the optimization split, one value per grid column."""
    return optimize_t_columns(np.asarray(opt_loss_matrix, dtype=float), cost)


def run_oce_rcps(opt_loss_matrix, cal_loss_matrix, lambda_grid, cost: CostFunction, alpha: float,
                 delta: float, cfg: WsrConfig | None = None) -> RcpsResult:
    """OCE-RCPS: fit ``t*(lambda)`` on the optimization split, then select on calibration."""
    cfg = cfg or WsrConfig(delta)
    t_star = fit_t_per_lambda(opt_loss_matrix, cost)
    return oce_rcps_select(cal_loss_matrix, lambda_grid, cost, t_star, alpha, cfg)


def run_oce_crc(opt_loss_matrix, cal_loss_matrix, lambda_grid, cost: CostFunction,
                alpha: float) -> tuple[float | None, float]:
    t_star = fit_t_per_lambda(opt_loss_matrix, cost)
    lam = oce_crc_select(cal_loss_matrix, lambda_grid, cost, t_star, alpha)
    grid = check_grid(lambda_grid)
    t_used = float(t_star[np.searchsorted(grid, lam)]) if lam is not None else float(t_star[-1])
    return lam, t_used
