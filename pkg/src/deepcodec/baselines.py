"""Sparse recovery by L1-penalized least squares, solved by coordinate descent.

Solves 0.5 * ||y - Phi x||^2 + lam * ||x||_1 with cyclic soft-threshold
updates over a precomputed Gram matrix.  The oracle variant sweeps a
descending lambda grid with warm starts and keeps whichever iterate is closest
to the known true signal, which is the strongest baseline this solver family
can produce.

The inner loop is JIT-compiled when numba is importable; the pure-python
fallback runs the same update order and exists so the package still works
(slowly) without a compiler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .signal_core import MeasurementMatrix

try:
    from numba import njit
except ImportError:  # pragma: no cover
    njit = None


def _cd_sweeps(G, c, lam, x, tol, max_iter):
    # Cyclic coordinate descent.  c holds Phi^T (y - Phi x) for the incoming x
    # and is updated in place, so resuming sweep-by-sweep (debug mode) follows
    # the exact arithmetic of one long call.
    n = c.shape[0]
    sweeps = 0
    last_delta = np.inf
    for it in range(max_iter):
        sweeps = it + 1
        max_delta = 0.0
        for j in range(n):
            gjj = G[j, j]
            if gjj == 0.0:
                continue
            z = c[j] + gjj * x[j]
            if z > lam:
                xj = (z - lam) / gjj
            elif z < -lam:
                xj = (z + lam) / gjj
            else:
                xj = 0.0
            d = xj - x[j]
            if d != 0.0:
                x[j] = xj
                c -= d * G[:, j]
                ad = abs(d)
                if ad > max_delta:
                    max_delta = ad
        last_delta = max_delta
        if max_delta < tol:
            break
    return sweeps, last_delta


if njit is not None:
    _cd_sweeps = njit(cache=True, nogil=True)(_cd_sweeps)


@dataclass
class CdSolution:
    estimate: np.ndarray  # (n, 1)
    sweeps: int
    converged: bool
    skipped: tuple[int, ...]  # zero-norm columns left at 0


@dataclass
class OracleResult:
    estimate: np.ndarray  # (n, 1)
    lam: float
    sq_error: float       # ||estimate - truth||^2
    sweeps: int           # total across the grid
    converged: bool       # every grid point converged


@dataclass
class LassoConfig:
    num_lambdas: int = 50
    lambda_ratio: float = 1e-4  # grid floor as a fraction of lambda_max
    tol: float = 1e-8
    max_iter: int = 10000

    def __post_init__(self):
        if self.num_lambdas < 1:
            raise ValueError("num_lambdas must be positive")
        if not (0.0 < self.lambda_ratio < 1.0):
            raise ValueError("lambda_ratio must be in (0, 1)")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol and max_iter must be positive")


def soft_threshold(z: np.ndarray, lam: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def lambda_max(phi: MeasurementMatrix, y: np.ndarray) -> float:
    """Smallest penalty for which the all-zero vector is optimal."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(phi.entries.T @ y)))


def lasso_objective(phi: MeasurementMatrix, y: np.ndarray, x: np.ndarray,
                    lam: float) -> float:
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    r = y - phi.entries @ x
    return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(x)))


def default_lambda_grid(lam_max: float, num: int = 50,
                        ratio: float = 1e-4) -> np.ndarray:
    """Descending log-spaced grid from lam_max down to ratio * lam_max."""
    if lam_max <= 0:
        # y is orthogonal to every column; any penalty gives the zero solution
        return np.zeros(1)
    return np.geomspace(lam_max, lam_max * ratio, num)


def lasso_cd(phi: MeasurementMatrix, y: np.ndarray, lam: float,
             tol: float = 1e-8, max_iter: int = 10000,
             x0: np.ndarray | None = None,
             debug_monotone: bool = False) -> CdSolution:
    """Solve one penalty level.  Termination: max coordinate change in a full
    sweep below tol, or max_iter sweeps.

    Columns with exactly zero norm have no say in the objective; they are
    skipped (their coefficient stays at its start value of 0) and reported.
    debug_monotone recomputes the objective after every sweep and raises
    NumericError if it ever increases beyond rounding.
    """
    if lam < 0:
        raise ValueError(f"lam must be nonnegative, got {lam}")
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    if yv.shape[0] != phi.m:
        raise ValueError(f"y has {yv.shape[0]} entries, matrix has {phi.m} rows")
    G = phi.entries.T @ phi.entries
    b = phi.entries.T @ yv
    diag = np.diag(G)
    skipped = tuple(int(j) for j in np.flatnonzero(diag == 0.0))
    x = np.zeros(phi.n) if x0 is None else \
        np.array(x0, dtype=np.float64).reshape(-1).copy()
    if x.shape[0] != phi.n:
        raise ValueError(f"x0 has {x.shape[0]} entries, expected {phi.n}")

    c = b - G @ x
    if debug_monotone:
        prev = lasso_objective(phi, yv, x, lam)
        sweeps_total = 0
        converged = False
        for _ in range(max_iter):
            s, last_delta = _cd_sweeps(G, c, lam, x, tol, 1)
            sweeps_total += s
            obj = lasso_objective(phi, yv, x, lam)
            if obj > prev + 1e-12 * max(1.0, abs(prev)):
                raise NumericError(f"objective rose {prev} -> {obj} on sweep "
                                   f"{sweeps_total}")
            prev = obj
            if last_delta < tol:
                converged = True
                break
        return CdSolution(estimate=x[:, None], sweeps=sweeps_total,
                          converged=converged, skipped=skipped)

    sweeps, last_delta = _cd_sweeps(G, c, lam, x, tol, max_iter)
    return CdSolution(estimate=x[:, None], sweeps=int(sweeps),
                      converged=bool(last_delta < tol), skipped=skipped)


def kkt_residuals(phi: MeasurementMatrix, y: np.ndarray, x: np.ndarray,
                  lam: float) -> tuple[float, float]:
    """Stationarity violations: (max over active coords of |c_j - lam*sign|,
    max over inactive coords of |c_j| - lam, floored at 0)."""
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    xv = np.asarray(x, dtype=np.float64).reshape(-1)
    c = phi.entries.T @ (yv - phi.entries @ xv)
    active = xv != 0.0
    max_active = float(np.max(np.abs(c[active] - lam * np.sign(xv[active])))) \
        if np.any(active) else 0.0
    max_inactive = float(np.max(np.abs(c[~active]) - lam)) \
        if np.any(~active) else 0.0
    return max_active, max(0.0, max_inactive)


def lasso_oracle(phi: MeasurementMatrix, y: np.ndarray, x_true: np.ndarray,
                 config: LassoConfig | None = None) -> OracleResult:
    """Best-achievable tuning: solve the whole path, return the grid point whose
    estimate is closest (squared error) to the known truth.

    The grid descends from lambda_max with warm starts, so each solve begins
    at the previous solution and the total sweep count stays small.
    """
    cfg = config or LassoConfig()
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    truth = np.asarray(x_true, dtype=np.float64).reshape(-1)
    if truth.shape[0] != phi.n:
        raise ValueError(f"truth has {truth.shape[0]} entries, expected {phi.n}")
    G = phi.entries.T @ phi.entries
    b = phi.entries.T @ yv
    grid = default_lambda_grid(lambda_max(phi, yv), cfg.num_lambdas,
                               cfg.lambda_ratio)

    x = np.zeros(phi.n)
    c = b.copy()  # equals b - G x at x = 0, maintained across the path
    best_err, best_x, best_lam = np.inf, x.copy(), float(grid[0])
    total_sweeps = 0
    all_converged = True
    for lam in grid:
        s, last_delta = _cd_sweeps(G, c, float(lam), x, cfg.tol, cfg.max_iter)
        total_sweeps += int(s)
        all_converged &= bool(last_delta < cfg.tol)
        err = float(np.sum((x - truth) ** 2))
        if err < best_err:
            best_err, best_x, best_lam = err, x.copy(), float(lam)
    return OracleResult(estimate=best_x[:, None], lam=best_lam,
                        sq_error=best_err, sweeps=total_sweeps,
                        converged=all_converged)
