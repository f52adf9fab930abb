"""Shared test oracles: finite differences, a naive convolution, and an
exhaustive L1 solver.  Everything here is deliberately independent of the
package's own implementations."""

import itertools

import numpy as np

# Two-tier gradient comparison: entries with magnitude at or above SCALE_FLOOR
# must agree to REL_TOL relative error; smaller entries must agree to ABS_TOL
# absolutely (relative error is meaningless against finite-difference noise).
REL_TOL = 1e-5
ABS_TOL = 1e-9
SCALE_FLOOR = 1e-4
FD_STEP = 1e-6


def numeric_grad(f, x, h=FD_STEP):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = f(x)
        flat_x[i] = orig - h
        lo = f(x)
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2.0 * h)
    return g


def grad_gap(analytic, numeric):
    """Worst-case normalized disagreement under the two-tier rule.

    Returns max over entries of |a - n| / max(|a|, |n|) where that scale is
    at least SCALE_FLOOR, and |a - n| / (ABS_TOL / REL_TOL) below it, so a
    return value <= REL_TOL means the check passes.
    """
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    assert a.shape == n.shape
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    big = scale >= SCALE_FLOOR
    worst = 0.0
    if np.any(big):
        worst = float(np.max(diff[big] / scale[big]))
    if np.any(~big):
        worst = max(worst, float(np.max(diff[~big])) * REL_TOL / ABS_TOL)
    return worst


def reference_conv1d(x, kernel, bias):
    """Same-length correlation by explicit loops; cross-checks the fast path."""
    length, cin = x.shape
    w, kcin, cout = kernel.shape
    assert cin == kcin
    pad = (w - 1) // 2
    out = np.zeros((length, cout))
    for i in range(length):
        for o in range(cout):
            acc = bias[o]
            for f in range(w):
                j = i + f - pad
                if 0 <= j < length:
                    for c in range(cin):
                        acc += x[j, c] * kernel[f, c, o]
            out[i, o] = acc
    return out


def brute_force_lasso(phi_entries, y, lam):
    """Global optimum of 0.5||y - Phi x||^2 + lam ||x||_1 by enumerating every
    sign pattern and solving the restricted stationarity equations.

    Tractable for n <= 8 (3^n patterns).  Every candidate is feasible, so the
    minimum objective over candidates equals the true optimum (the optimizer's
    own sign pattern is among them).
    """
    phi = np.asarray(phi_entries, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    m, n = phi.shape
    assert n <= 8, "pattern enumeration is exponential"

    def objective(x):
        r = y - phi @ x
        return 0.5 * float(r @ r) + lam * float(np.sum(np.abs(x)))

    best_x = np.zeros(n)
    best_obj = objective(best_x)
    for signs in itertools.product((-1, 0, 1), repeat=n):
        s = np.array(signs, dtype=np.float64)
        active = np.flatnonzero(s)
        if active.size == 0:
            continue
        pa = phi[:, active]
        rhs = pa.T @ y - lam * s[active]
        sol, *_ = np.linalg.lstsq(pa.T @ pa, rhs, rcond=None)
        x = np.zeros(n)
        x[active] = sol
        obj = objective(x)
        if obj < best_obj:
            best_obj = obj
            best_x = x
    return best_x, best_obj
