"""Parametric treatment-assignment model.

The treatment probability given the untreated outcome y0 and the
non-shadow covariates u is logistic:

    pi(y0, u; theta) = expit(theta[0] + theta[1]*y0 + theta[2:] @ u)

theta is a plain 1-D array of length d = 2 + len(u), ordered
(intercept, y0 coefficient, u coefficients).  Only pi and its gradient
are needed by any estimator, so alternative link functions can slot in
by replacing these two functions.
"""

from __future__ import annotations

import numpy as np

from .exceptions import DimensionMismatch

# expit output is kept strictly inside (0, 1) so that downstream odds and
# inverse-probability ratios stay finite for any finite linear predictor.
_LO = np.nextafter(0.0, 1.0)
_HI = np.nextafter(1.0, 0.0)


def expit(x):
    """Branch-stable logistic function, strictly inside (0, 1).

    Uses 1/(1+exp(-x)) for x >= 0 and exp(x)/(1+exp(x)) for x < 0, so no
    intermediate overflows for |x| up to ~700.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    np.clip(out, _LO, _HI, out=out)
    return float(out[0]) if scalar else out


def check_theta(theta, p: int | None = None) -> np.ndarray:
    """Validate and return theta as a float array of length 2 + p."""
    th = np.asarray(theta, dtype=float).ravel()
    if not np.all(np.isfinite(th)):
        raise ValueError("theta entries must be finite")
    if th.size < 2:
        raise DimensionMismatch(f"theta needs at least 2 entries, got {th.size}")
    if p is not None and th.size != 2 + p:
        raise DimensionMismatch(f"theta has length {th.size}, expected {2 + p}")
    return th


def linear_predictor(y0, u, theta) -> np.ndarray:
    """theta[0] + theta[1]*y0 + u @ theta[2:], vectorized over rows of u."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    th = check_theta(theta, u.shape[1])
    return th[0] + th[1] * np.asarray(y0, dtype=float) + u @ th[2:]


def pi(y0, u, theta) -> float:
    """Treatment probability for one subject."""
    u = np.asarray(u, dtype=float).ravel()
    return float(expit(linear_predictor(y0, u[None, :], theta))[0])


def pi_gradient(y0, u, theta) -> np.ndarray:
    """Gradient of pi with respect to theta: pi*(1-pi) * (1, y0, u)."""
    u = np.asarray(u, dtype=float).ravel()
    p = pi(y0, u, theta)
    return p * (1.0 - p) * np.concatenate(([1.0, float(y0)], u))


def pi_both(u, theta):
    """pi evaluated at y0=0 and y0=1 for every row of u.

    Returns (pi0, pi1), each of shape (n,).  These two values determine
    every conditional bracket for a binary untreated outcome.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    th = check_theta(theta, u.shape[1])
    base = th[0] + u @ th[2:]
    return expit(base), expit(base + th[1])


def pi_observed(y, u, theta) -> np.ndarray:
    """pi at the observed outcome, rowwise: expit(th0 + th1*y + u@th2)."""
    u = np.atleast_2d(np.asarray(u, dtype=float))
    th = check_theta(theta, u.shape[1])
    return expit(th[0] + th[1] * np.asarray(y, dtype=float) + u @ th[2:])
