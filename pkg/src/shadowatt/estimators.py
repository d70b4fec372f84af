"""Point estimators, plug-in variance blocks, and the endogeneity test.

The propensity parameters solve a d-dimensional estimating equation
(efficient score, or an arbitrary moment choice); the ATT estimators are
closed-form ratios of weighted sample means.  Every sample mean accepts a
per-row weight vector so perturbation resampling can reuse the exact same
code path (unit weights reproduce the point estimates bit-for-bit).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import (DegenerateDenominator, NonConvergence, NoTreatedUnits,
                         NumericalBlowup, SingularJacobian, SingularM)
from .moments import control_outcome_mean, moment_frame, nuisance_values
from .nuisance import fit_logistic, fit_knn, fit_pair, default_knn_k
from .propensity import pi_both
from .scores import att_moment_parts, s_eff_values, treated_factor

DEGENERATE_DEN = 1e-12


@dataclass(frozen=True)
class SolverOptions:
    """Damped quasi-Newton settings for the estimating-equation solves.

    The outcome-coefficient direction of the score flattens as the
    coefficient runs to +/- infinity, so the equation has degenerate
    "roots at infinity".  max_step caps each Newton move and bound keeps
    iterates inside a compact region; a path that escapes is treated as
    non-convergence (the next start, or the caller's failure accounting,
    takes over).
    """

    max_iter: int = 100
    step_tol: float = 1e-10
    residual_tol: float = 1e-8
    fd_step: float = 1e-6
    max_halvings: int = 30
    max_step: float = 2.0
    bound: float = 10.0
    init: np.ndarray | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if min(self.step_tol, self.residual_tol, self.fd_step) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class SolveDiagnostics:
    iterations: int
    residual: float
    evaluations: int
    converged: bool
    start_index: int = 0
    warnings: tuple = ()


@dataclass(frozen=True)
class WaldTest:
    statistic: float
    p_value: float


@dataclass(frozen=True)
class VarianceBlocks:
    """Plug-in variance pieces for the joint (theta, delta) estimator."""

    M_hat: np.ndarray
    Q_hat: np.ndarray
    D_hat: np.ndarray
    p_hat: float
    H_hat: np.ndarray
    J_hat: np.ndarray
    V_hat: np.ndarray
    mean_phi_sq: float
    n: int

    def se_theta(self) -> np.ndarray:
        return np.sqrt(np.diag(np.linalg.inv(self.M_hat)) / self.n)

    def se_delta(self) -> float:
        return float(np.sqrt(self.V_hat[-1, -1] / self.n))


@dataclass
class EstimateReport:
    """Estimates plus inference pieces, keyed eff / alt / nv1 / nv2."""

    theta_hat: np.ndarray
    delta_estimates: dict
    se_analytic: dict = field(default_factory=dict)
    sd_perturb: dict = field(default_factory=dict)
    ci_95: dict = field(default_factory=dict)
    wald_theta2: WaldTest | None = None
    blocks: VarianceBlocks | None = None
    diagnostics: dict = field(default_factory=dict)

    def targets(self) -> dict:
        """Flat name -> value map used by perturbation resampling."""
        out = {f"theta_{j + 1}": float(v) for j, v in enumerate(self.theta_hat)}
        out.update({f"delta_{k}": float(v) for k, v in self.delta_estimates.items()})
        return out

    def refresh_ci(self):
        """ci_95 = estimate +/- 1.96*sd, preferring perturbation sds."""
        est = self.targets()
        self.ci_95 = {}
        for key, value in est.items():
            sd = self.sd_perturb.get(key, self.se_analytic.get(key))
            if sd is not None and np.isfinite(sd):
                self.ci_95[key] = (value - 1.96 * sd, value + 1.96 * sd)


# ------------------------------------------------------------- root solve


def _norm(v):
    v = np.asarray(v)
    return np.inf if not np.all(np.isfinite(v)) else float(np.max(np.abs(v)))


def _solve_root(residual_fn, x0, opts: SolverOptions):
    """Damped quasi-Newton with central finite-difference Jacobian."""
    x = np.array(x0, dtype=float)
    d = x.size
    evals = 0

    def safe(xv):
        nonlocal evals
        evals += 1
        try:
            return np.asarray(residual_fn(xv), dtype=float)
        except NumericalBlowup:
            return np.full(d, np.inf)

    r = safe(x)
    res = _norm(r)
    warnings = []
    for it in range(opts.max_iter):
        if np.max(np.abs(x)) > opts.bound:
            raise NonConvergence(res, it)
        if res <= opts.residual_tol:
            return x, SolveDiagnostics(it, res, evals, True, warnings=tuple(warnings))
        jac = np.empty((d, d))
        for k in range(d):
            h = opts.fd_step * max(1.0, abs(x[k]))
            e = np.zeros(d)
            e[k] = h
            jac[:, k] = (safe(x + e) - safe(x - e)) / (2.0 * h)
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError:
            try:
                step = np.linalg.solve(jac + 1e-8 * np.eye(d), -r)
            except np.linalg.LinAlgError:
                raise SingularJacobian("estimating-equation Jacobian is singular") from None
        if not np.all(np.isfinite(step)):
            raise SingularJacobian("estimating-equation Jacobian produced a non-finite step")
        big = _norm(step)
        if big > opts.max_step:
            step *= opts.max_step / big

        lam, improved = 1.0, False
        for _ in range(opts.max_halvings + 1):
            cand = x + lam * step
            rc = safe(cand)
            if _norm(rc) < res:
                x, r, res = cand, rc, _norm(rc)
                improved = True
                break
            lam *= 0.5
        if not improved:
            warnings.append("line search stalled")
            break
        if lam * _norm(step) < opts.step_tol:
            break
    if res <= opts.residual_tol and np.max(np.abs(x)) <= opts.bound:
        return x, SolveDiagnostics(opts.max_iter, res, evals, True, warnings=tuple(warnings))
    raise NonConvergence(res, opts.max_iter)


def _require_both_arms(ds):
    n1 = int(ds.t.sum())
    if n1 == 0:
        raise NoTreatedUnits("no treated rows")
    if n1 == ds.n:
        raise ValueError("both treatment arms required (no control rows)")


def _weights(ds, weights):
    w = np.ones(ds.n) if weights is None else np.asarray(weights, dtype=float).ravel()
    if w.shape[0] != ds.n:
        raise ValueError("weights length must match dataset size")
    return w


def _fallback_start(ds):
    """Logistic fit of T on (y*(1-t) proxy, u) as a second solver start.

    The proxy column separates the fit by construction (proxy = 1 forces
    t = 0), so the coefficients are clipped into the admissible region;
    they only seed the solver.
    """
    proxy = ds.y * (1 - ds.t)
    feats = np.column_stack([proxy, ds.u])
    model = fit_logistic(feats, ds.t, arm=1)
    return np.clip(model.coef, -2.0, 2.0)


def _solve_multistart(residual, ds, opts: SolverOptions):
    """Try opts.init (default zero), a crude logistic warm start, then the
    warm start with the outcome coefficient swept over both signs.

    The sweep matters: the finite root can sit on either side of the
    score's ridge in the outcome-coefficient direction, and a start on
    the wrong side slides into the degenerate tail.
    """
    d = 2 + ds.p
    starts = [np.zeros(d) if opts.init is None else np.asarray(opts.init, dtype=float)]
    try:
        proxy = _fallback_start(ds)
        starts.append(proxy)
        for t2 in (1.0, -1.0, 2.5, -2.5):
            swept = proxy.copy()
            swept[1] = t2
            starts.append(swept)
    except Exception:
        pass
    last_error = None
    for si, start in enumerate(starts):
        try:
            theta, diag = _solve_root(residual, start, opts)
            return theta, replace(diag, start_index=si)
        except (NonConvergence, SingularJacobian) as exc:
            last_error = exc
    raise last_error


def solve_theta_eff(ds, nuis, opts: SolverOptions | None = None, weights=None,
                    m0=None):
    """Root of the weighted mean efficient score.

    Returns (theta_hat, SolveDiagnostics).  Starts at zero (or opts.init)
    and retries from a crude logistic fit if the first start stalls.
    """
    opts = opts or SolverOptions()
    _require_both_arms(ds)
    xi = _weights(ds, weights)
    xi_norm = xi / xi.sum()
    if m0 is None:
        m0 = nuis.p0.predict(ds.x)

    def residual(theta):
        return xi_norm @ s_eff_values(ds, theta, m0)

    return _solve_multistart(residual, ds, opts)


def solve_theta_with_g(ds, g, opts: SolverOptions | None = None, weights=None):
    """Solve the moment equation mean[factor(theta) * g(x, theta)] = 0.

    g(X, theta) must return an (n, d) matrix; choices that depend on the
    fitted nuisance are built with the make_g_* factories below.
    """
    opts = opts or SolverOptions()
    _require_both_arms(ds)
    xi = _weights(ds, weights)
    xi_norm = xi / xi.sum()
    d = 2 + ds.p

    def residual(theta):
        gx = np.atleast_2d(np.asarray(g(ds.x, theta), dtype=float))
        if gx.shape != (ds.n, d):
            raise ValueError(f"g must return shape {(ds.n, d)}, got {gx.shape}")
        factor = treated_factor(ds.t, ds.y, ds.u, theta)
        return xi_norm @ (factor[:, None] * gx)

    return _solve_multistart(residual, ds, opts)


def make_g_efficient(ds, nuis):
    """The optimal moment choice: bracket ratio e0_dpi / e0_pi."""
    m0 = nuis.p0.predict(ds.x)

    def g(X, theta):
        f = moment_frame(X[:, : ds.p], theta, m0)
        return f.e0_dpi / f.e0_pi[:, None]

    return g


def make_g_poly(ds, nuis, weights=None):
    """Moment columns (w, w*u1, w*u1^2) for a 1-D u, dataset-bound.

    w is the model-implied marginal treated probability at the running
    theta.  Fair warning: these columns carry no direct outcome-coordinate
    information, so the finite-sample equation can lack a root; the solver
    then reports non-convergence honestly.
    """
    m0 = nuis.p0.predict(ds.x)
    u1 = ds.u[:, 0]

    def g(X, theta):
        f = moment_frame(ds.u, theta, m0)
        return np.column_stack([f.w, f.w * u1, f.w * u1 ** 2])

    return g


def make_g_mixed(ds, nuis, weights=None):
    """Moment columns (w, pi(1,u;theta)*E0(Y0|x), w*u1) for a 1-D u.

    All pieces are model-implied at the running theta; E0(Y0|x) is the
    change-of-measure mean built from the control-arm fit.
    """
    m0 = nuis.p0.predict(ds.x)
    u1 = ds.u[:, 0]

    def g(X, theta):
        f = moment_frame(ds.u, theta, m0)
        _, pi1 = pi_both(ds.u, theta)
        e0y = control_outcome_mean(ds.u, theta, m0)
        return np.column_stack([f.w, pi1 * e0y, f.w * u1])

    return g


# --------------------------------------------------------- ATT estimators


def delta_eff(ds, theta, nuis, weights=None, m0=None, m1=None) -> float:
    """Efficient ATT: ratio of weighted means of the moment parts."""
    xi = _weights(ds, weights)
    if m0 is None or m1 is None:
        m0n, m1n = nuisance_values(nuis, ds.x, need_p1=True)
        m0 = m0n if m0 is None else m0
        m1 = m1n if m1 is None else m1
    num, den = att_moment_parts(ds, theta, m0, m1)
    den_mean = float((xi * den).sum() / xi.sum())
    if abs(den_mean) < DEGENERATE_DEN:
        raise DegenerateDenominator(den_mean)
    return float((xi * num).sum() / xi.sum() / den_mean)


def delta_alt(ds, theta, weights=None) -> float:
    """Odds-weighting ATT: mean[factor * y] / mean[t]."""
    xi = _weights(ds, weights)
    n_treat = float((xi * ds.t).sum())
    if n_treat <= 0:
        raise NoTreatedUnits("weighted treated count is zero")
    factor = treated_factor(ds.t, ds.y, ds.u, theta)
    return float((xi * factor * ds.y).sum() / n_treat)


def delta_nv1(ds, w_model, weights=None) -> float:
    """Naive odds-of-w weighting under assumed ignorability."""
    xi = _weights(ds, weights)
    n_treat = float((xi * ds.t).sum())
    if n_treat <= 0:
        raise NoTreatedUnits("weighted treated count is zero")
    w_hat = w_model.predict(ds.x)
    term = ds.t * ds.y - (1 - ds.t) * (w_hat / (1.0 - w_hat)) * ds.y
    return float((xi * term).sum() / n_treat)


def delta_nv2(ds, w_model, m0_on_x, weights=None) -> float:
    """Naive augmented estimator (doubly robust under ignorability)."""
    xi = _weights(ds, weights)
    n_treat = float((xi * ds.t).sum())
    if n_treat <= 0:
        raise NoTreatedUnits("weighted treated count is zero")
    w_hat = w_model.predict(ds.x)
    m0x = m0_on_x.predict(ds.x) if hasattr(m0_on_x, "predict") else np.asarray(m0_on_x, float)
    term = (ds.t * ds.y
            - (1 - ds.t) * (w_hat / (1.0 - w_hat)) * ds.y
            - ((ds.t - w_hat) / (1.0 - w_hat)) * m0x)
    return float((xi * term).sum() / n_treat)


# ------------------------------------------------------ variance blocks


def variance_blocks(ds, theta, delta, nuis, m0=None, m1=None) -> VarianceBlocks:
    """Plug-in M, Q, D, H and the Theorem-style J and V matrices.

    Q averages the population moment E[Y0 (1-pi)^{-1} dpi] through the
    change-of-measure identity, so every row contributes.
    """
    if m0 is None or m1 is None:
        m0n, m1n = nuisance_values(nuis, ds.x, need_p1=True)
        m0 = m0n if m0 is None else m0
        m1 = m1n if m1 is None else m1
    n, d = ds.n, 2 + ds.p
    f = moment_frame(ds.u, theta, m0, m1, delta)

    M = (f.A.T @ (f.A / f.B[:, None])) / n
    M = 0.5 * (M + M.T)
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise SingularM("plug-in M is not positive definite") from None

    _, pi1 = pi_both(ds.u, theta)
    r1 = pi1 / (1.0 - pi1)
    qw = (1.0 - f.w) * np.asarray(m0, float) * r1
    Q = np.column_stack([qw, qw, qw[:, None] * ds.u]).sum(axis=0) / n

    D = (f.A * (f.V / f.B)[:, None]).sum(axis=0) / n
    p_hat = float(ds.t.mean())
    Minv = np.linalg.inv(M)
    H = Minv @ (D - Q) / p_hat

    num, den = att_moment_parts(ds, theta, m0, m1)
    phi = (num - float(delta) * den) / p_hat
    mean_phi_sq = float(np.mean(phi ** 2))

    J = np.zeros((d + 1, d + 1))
    J[:d, :d] = -M
    J[d, :d] = (D - Q) / p_hat
    J[d, d] = -1.0
    V = np.zeros((d + 1, d + 1))
    V[:d, :d] = Minv
    V[:d, d] = Minv @ (D - Q) / p_hat
    V[d, :d] = V[:d, d]
    V[d, d] = float((D - Q) @ Minv @ (D - Q)) / p_hat ** 2 + mean_phi_sq
    return VarianceBlocks(M, Q, D, p_hat, H, J, V, mean_phi_sq, n)


def wald_theta2(theta_hat, blocks: VarianceBlocks) -> WaldTest:
    """Two-sided normal test of the outcome coefficient theta_2 = 0."""
    se = blocks.se_theta()[1]
    z = float(theta_hat[1] / se)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WaldTest(z, p)


# ------------------------------------------------------- full pipeline


def fit_w_model(ds, kind="logistic", weights=None, k=None):
    """Propensity-on-x fit pr(T=1 | x) on the full sample (naive methods)."""
    X = ds.x
    if kind == "logistic":
        return fit_logistic(X, ds.t, weights, arm=1)
    if kind == "knn":
        kk = default_knn_k(ds.n) if k is None else int(k)
        return fit_knn(X, ds.t, weights, k=kk, arm=1)
    raise ValueError(f"unknown nuisance kind {kind!r}")


def estimate_all(ds, nuisance="logistic", knn_k=None, opts=None, weights=None,
                 include_naive=True, compute_se=True) -> EstimateReport:
    """Full-sample pipeline: nuisances, theta_eff, all ATT estimators.

    With a weight vector this becomes the perturbed pipeline: weighted
    nuisance fits and weighted estimating equations throughout.
    """
    _require_both_arms(ds)
    xi = _weights(ds, weights)
    nuis = fit_pair(ds, nuisance, xi, k=knn_k, need_p1=True)
    m0, m1 = nuisance_values(nuis, ds.x, need_p1=True)

    theta, diag = solve_theta_eff(ds, nuis, opts, xi, m0=m0)
    warnings = list(diag.warnings)
    try:
        d_eff = delta_eff(ds, theta, nuis, xi, m0=m0, m1=m1)
    except DegenerateDenominator:
        d_eff = delta_alt(ds, theta, xi)
        warnings.append("delta_eff denominator degenerate; fell back to delta_alt")
    deltas = {"eff": d_eff, "alt": delta_alt(ds, theta, xi)}

    if include_naive:
        w_model = fit_w_model(ds, nuisance, xi, k=knn_k)
        # the control-arm conditional-mean fit doubles as the naive
        # outcome model: both are y ~ x on control rows
        deltas["nv1"] = delta_nv1(ds, w_model, xi)
        deltas["nv2"] = delta_nv2(ds, w_model, nuis.p0, xi)

    report = EstimateReport(
        theta_hat=theta,
        delta_estimates=deltas,
        diagnostics={
            "iterations": diag.iterations,
            "residual": diag.residual,
            "solver_start": diag.start_index,
            "warnings": tuple(warnings),
            "p_hat": float((xi * ds.t).sum() / xi.sum()),
            "nuisance": nuisance,
        },
    )
    if compute_se:
        blocks = variance_blocks(ds, theta, d_eff, nuis, m0=m0, m1=m1)
        report.blocks = blocks
        se_th = blocks.se_theta()
        report.se_analytic = {f"theta_{j + 1}": float(s) for j, s in enumerate(se_th)}
        report.se_analytic["delta_eff"] = blocks.se_delta()
        report.wald_theta2 = wald_theta2(theta, blocks)
        report.refresh_ci()
    return report
