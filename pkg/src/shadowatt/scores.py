"""Per-observation score and influence functions.

Everything here is built from the treated-arm score factor
(t - pi)/(1 - pi), which is identically 1 for treated rows (independent
of the unobservable untreated outcome) and -pi(y,u)/(1-pi(y,u)) for
control rows, where y is the observed (untreated) outcome.  That identity
is what makes each formula computable from observed data.

Array-level *_values functions power the estimators; the scalar wrappers
evaluate one observation against a ScoreContext.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import MissingH, NumericalBlowup
from .moments import SATURATION, moment_frame, nuisance_values
from .propensity import pi_observed


@dataclass(frozen=True)
class ScoreContext:
    """Frozen inputs shared by all score evaluations on one dataset."""

    theta: np.ndarray
    delta: float | None = None
    p_hat: float | None = None
    nuis: object | None = None
    H: np.ndarray | None = None

    def __post_init__(self):
        if self.p_hat is not None and not 0.0 < self.p_hat < 1.0:
            raise ValueError("p_hat must be strictly inside (0, 1)")


def make_context(ds, theta, nuis=None, delta=None, H=None, weights=None) -> ScoreContext:
    """Build a ScoreContext with the (weighted) sample treated fraction."""
    w = np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float).ravel()
    p_hat = float((w * ds.t).sum() / w.sum())
    return ScoreContext(np.asarray(theta, dtype=float), delta, p_hat, nuis, H)


def treated_factor(t, y, u, theta) -> np.ndarray:
    """(t - pi)/(1 - pi) per row: 1 when t=1, -odds(pi(y,u)) when t=0."""
    t = np.asarray(t)
    pi_obs = pi_observed(y, u, theta)
    if pi_obs.max(initial=0.0) > SATURATION:
        raise NumericalBlowup(pi_obs.max())
    odds = pi_obs / (1.0 - pi_obs)
    return np.where(t == 1, 1.0, -odds)


# ------------------------------------------------------- array versions


def s_eff_values(ds, theta, m0, weights_unused=None) -> np.ndarray:
    """Efficient-score rows (n x d): factor * bracket ratio at each x."""
    f = moment_frame(ds.u, theta, m0)
    factor = treated_factor(ds.t, ds.y, ds.u, theta)
    return factor[:, None] * (f.e0_dpi / f.e0_pi[:, None])


def att_moment_parts(ds, theta, m0, m1):
    """Numerator/denominator rows of the efficient ATT estimating equation.

    Returns (num, den) with num_i = factor*(y - C/B) and
    den_i = t - factor*w/B, where C = w*m1 + (1-w)*e0_y0pi2.
    The influence function is p^{-1}(num - delta*den).
    """
    f = moment_frame(ds.u, theta, m0)
    factor = treated_factor(ds.t, ds.y, ds.u, theta)
    m1 = np.asarray(m1, dtype=float).ravel()
    C = f.w * m1 + (1.0 - f.w) * f.e0_y0pi2
    num = factor * (ds.y - C / f.B)
    den = ds.t - factor * f.w / f.B
    return num, den


def phi_values(ds, ctx: ScoreContext, m0=None, m1=None) -> np.ndarray:
    """Efficient-at-fixed-theta influence function, per row."""
    m0, m1 = _fill_nuisance(ds, ctx, m0, m1, need_p1=True)
    num, den = att_moment_parts(ds, ctx.theta, m0, m1)
    return (num - ctx.delta * den) / ctx.p_hat


def phi_alt_values(ds, ctx: ScoreContext) -> np.ndarray:
    """Odds-weighting influence function p^{-1}(factor*y - t*delta)."""
    factor = treated_factor(ds.t, ds.y, ds.u, ctx.theta)
    return (factor * ds.y - ds.t * ctx.delta) / ctx.p_hat


def phi_eff_values(ds, ctx: ScoreContext, m0=None, m1=None) -> np.ndarray:
    """Full efficient influence function phi + H' s_eff."""
    if ctx.H is None:
        raise MissingH("ScoreContext.H is required for phi_eff")
    m0, m1 = _fill_nuisance(ds, ctx, m0, m1, need_p1=True)
    return phi_values(ds, ctx, m0, m1) + s_eff_values(ds, ctx.theta, m0) @ ctx.H


def projection_residual_values(ds, ctx: ScoreContext, m0=None, m1=None) -> np.ndarray:
    """Orthogonal-complement part of phi_alt: factor * V / (p_hat * B).

    Satisfies phi_alt = phi + residual row by row.
    """
    m0, m1 = _fill_nuisance(ds, ctx, m0, m1, need_p1=True)
    f = moment_frame(ds.u, ctx.theta, m0, m1, ctx.delta)
    factor = treated_factor(ds.t, ds.y, ds.u, ctx.theta)
    return factor * f.V / (ctx.p_hat * f.B)


def _fill_nuisance(ds, ctx, m0, m1, need_p1):
    if m0 is None or (m1 is None and need_p1):
        if ctx.nuis is None:
            raise ValueError("ScoreContext.nuis needed when m0/m1 are not given")
        m0n, m1n = nuisance_values(ctx.nuis, ds.x, need_p1=need_p1)
        m0 = m0n if m0 is None else m0
        m1 = m1n if m1 is None else m1
    return m0, m1


# ------------------------------------------------ one-observation forms


def _single(ds_builder, obs):
    from .data import Dataset

    return Dataset(np.array([obs.t]), np.array([obs.y]), obs.u[None, :], obs.z[None, :])


def s_eff(obs, ctx: ScoreContext) -> np.ndarray:
    ds = _single(None, obs)
    m0, _ = _fill_nuisance(ds, ctx, None, True, need_p1=False)
    return s_eff_values(ds, ctx.theta, m0)[0]


def phi(obs, ctx: ScoreContext) -> float:
    return float(phi_values(_single(None, obs), ctx)[0])


def phi_alt(obs, ctx: ScoreContext) -> float:
    return float(phi_alt_values(_single(None, obs), ctx)[0])


def phi_eff(obs, ctx: ScoreContext) -> float:
    return float(phi_eff_values(_single(None, obs), ctx)[0])


def phi_projection_residual(obs, ctx: ScoreContext) -> float:
    return float(projection_residual_values(_single(None, obs), ctx)[0])
