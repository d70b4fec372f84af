"""Derived conditional moments for a binary untreated outcome.

With y0 binary, every conditional expectation over the control-arm law
collapses to a two-term sum over y0 in {0, 1} weighted by the fitted
conditional mean m0(x) = P(Y0=1 | x, T=0).  This module evaluates those
brackets, the implied marginal treated probability w(x), and the A, B, V
fields used by every score and variance formula.

Identities maintained here (and tested to 1e-12):
    w  = 1 - 1 / E0[(1-pi)^{-1} | x, 0]
    A  = (1-w) * E0[(1-pi)^{-2} dpi | x, 0]
    B  = (1-w) * E0[(1-pi)^{-2} pi  | x, 0]
and the change of measure
    E0[a | x] = (1-w) * E0[(1-pi)^{-1} a | x, 0].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NumericalBlowup
from .propensity import check_theta, pi_both

SATURATION = 1.0 - 1e-10


@dataclass(frozen=True)
class DerivedMoments:
    """Per-row derived moments; fields are arrays of length n (A, e0_dpi: n x d)."""

    w: np.ndarray
    A: np.ndarray
    B: np.ndarray
    e0_inv: np.ndarray
    e0_pi: np.ndarray
    e0_dpi: np.ndarray
    e0_y0pi2: np.ndarray
    e1_y1: np.ndarray | None = None
    V: np.ndarray | None = None


def moment_frame(u, theta, m0, m1=None, delta=None) -> DerivedMoments:
    """Vectorized moments from explicit nuisance values.

    u: (n, p) non-shadow covariates; m0/m1: fitted conditional means
    evaluated at each row's full covariates.  V is filled only when both
    m1 and delta are supplied.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    th = check_theta(theta, u.shape[1])
    m0 = np.asarray(m0, dtype=float).ravel()
    pi0, pi1 = pi_both(u, th)
    top = max(pi0.max(initial=0.0), pi1.max(initial=0.0))
    if top > SATURATION:
        raise NumericalBlowup(top)

    inv0 = 1.0 / (1.0 - pi0)
    inv1 = 1.0 / (1.0 - pi1)
    r0 = pi0 * inv0  # odds pi/(1-pi) at y0 = 0
    r1 = pi1 * inv1

    q0 = 1.0 - m0  # P(Y0=0 | x, 0)
    e0_inv = q0 * inv0 + m0 * inv1
    e0_pi = q0 * pi0 * inv0 ** 2 + m0 * pi1 * inv1 ** 2
    e0_y0pi2 = m0 * r1 ** 2
    # dpi*(1-pi)^{-2} = pi/(1-pi) * (1, y0, u), summed over y0 in {0,1}
    s = q0 * r0 + m0 * r1
    e0_dpi = np.column_stack([s, m0 * r1, s[:, None] * u])

    w = 1.0 - 1.0 / e0_inv
    shrink = (1.0 - w)
    A = shrink[:, None] * e0_dpi
    B = shrink * e0_pi

    e1 = None if m1 is None else np.asarray(m1, dtype=float).ravel()
    V = None
    if delta is not None:
        if e1 is None:
            raise ValueError("V requires the treated-arm conditional mean")
        V = w * e1 - w * float(delta) + shrink * e0_y0pi2
    return DerivedMoments(w, A, B, e0_inv, e0_pi, e0_dpi, e0_y0pi2, e1, V)


def nuisance_values(nuis, X, need_p1=False):
    """Evaluate (m0, m1) for every row of the covariate matrix X."""
    m0 = nuis.p0.predict(X)
    m1 = None
    if nuis.p1 is not None:
        m1 = nuis.p1.predict(X)
    elif need_p1:
        raise ValueError("treated-arm nuisance p1 is required but not fitted")
    return m0, m1


def compute_moments(u, z, theta, nuis, delta=None) -> DerivedMoments:
    """Moments for a single observation (u, z are 1-D vectors).

    Returned fields are scalars (vectors of length d for A and e0_dpi).
    """
    u = np.asarray(u, dtype=float).ravel()
    z = np.asarray(z, dtype=float).ravel()
    X = np.concatenate([u, z])[None, :]
    m0, m1 = nuisance_values(nuis, X, need_p1=delta is not None)
    f = moment_frame(u[None, :], theta, m0, m1, delta)
    pick = lambda a: None if a is None else (a[0] if a.ndim == 1 else a[0].copy())
    return DerivedMoments(
        w=float(f.w[0]), A=f.A[0].copy(), B=float(f.B[0]),
        e0_inv=float(f.e0_inv[0]), e0_pi=float(f.e0_pi[0]), e0_dpi=f.e0_dpi[0].copy(),
        e0_y0pi2=float(f.e0_y0pi2[0]),
        e1_y1=None if f.e1_y1 is None else float(f.e1_y1[0]),
        V=None if f.V is None else float(f.V[0]),
    )


def control_outcome_mean(u, theta, m0) -> np.ndarray:
    """Implied unconditional mean E0(Y0 | x) = (1-w) * m0 / (1-pi(1,u)).

    Change of measure from the control-arm law to the full conditional law.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    m0 = np.asarray(m0, dtype=float).ravel()
    pi0, pi1 = pi_both(u, theta)
    top = max(pi0.max(initial=0.0), pi1.max(initial=0.0))
    if top > SATURATION:
        raise NumericalBlowup(top)
    q0 = 1.0 - m0
    e0_inv = q0 / (1.0 - pi0) + m0 / (1.0 - pi1)
    return (1.0 / e0_inv) * m0 / (1.0 - pi1)
