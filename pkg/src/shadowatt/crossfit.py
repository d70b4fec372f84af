"""K-fold cross-fitting: out-of-fold nuisances, pooled estimating equation.

Each row's score is evaluated with the nuisance fitted on that row's fold
complement, then the stacked equation is solved once.  The theta block of
the system does not involve the ATT, so the solve is block-sequential:
theta first, then the ATT in closed form from the pooled moment parts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimators import (EstimateReport, SolverOptions, _require_both_arms,
                         _solve_multistart, _weights, delta_alt, delta_eff,
                         delta_nv1, delta_nv2, fit_w_model, variance_blocks,
                         wald_theta2)
from .exceptions import InfeasibleStratification
from .nuisance import fit_pair
from .scores import s_eff_values
from .streams import stream


@dataclass(frozen=True)
class FoldPlan:
    """Row -> fold assignment, stratified by treatment arm."""

    K: int
    assignment: np.ndarray
    seed: int

    def rows(self, k) -> np.ndarray:
        return np.nonzero(self.assignment == k)[0]

    def complement(self, k) -> np.ndarray:
        return np.nonzero(self.assignment != k)[0]


def make_folds(ds, K: int, seed: int) -> FoldPlan:
    """Random partition into K folds with proportional treated counts.

    Deterministic given (n, K, seed); fold sizes differ by at most one.
    """
    K = int(K)
    if K < 2:
        raise ValueError("K must be at least 2")
    if ds.n < 2 * K:
        raise ValueError(f"need n >= 2K rows, got n={ds.n}, K={K}")
    rng = stream(seed, "folds")
    treated = np.nonzero(ds.t == 1)[0]
    control = np.nonzero(ds.t == 0)[0]
    for arm, idx in ((1, treated), (0, control)):
        if idx.size < K:
            raise InfeasibleStratification(arm, idx.size, K)
    # one continuous round-robin deal over (shuffled treated, shuffled
    # control) keeps overall fold sizes within 1 and both arms spread
    order = np.concatenate([rng.permutation(treated), rng.permutation(control)])
    assignment = np.empty(ds.n, dtype=np.int64)
    assignment[order] = np.arange(ds.n) % K
    return FoldPlan(K, assignment, int(seed))


def check_no_leak(plan: FoldPlan, fold_models) -> None:
    """Raise if any fold's model saw rows from that fold during fitting."""
    for k, pair in enumerate(fold_models):
        fold_rows = set(int(i) for i in plan.rows(k))
        for model in (pair.p0, pair.p1):
            if model is None or model.fit_rows is None:
                continue
            overlap = fold_rows & set(model.fit_rows)
            if overlap:
                raise RuntimeError(
                    f"nuisance leak: fold {k} model was fit on its own rows {sorted(overlap)[:5]}"
                )


def fit_fold_nuisances(ds, plan: FoldPlan, nuisance="logistic", knn_k=None,
                       weights=None, fixed_pair=None):
    """Per-fold nuisance pairs fit on each fold's complement.

    fixed_pair pins every fold to one pre-fitted pair (diagnostic hook:
    cross-fitting with a pinned nuisance equals the full-sample fit).
    """
    if fixed_pair is not None:
        return [fixed_pair] * plan.K
    xi = _weights(ds, weights)
    models = []
    for k in range(plan.K):
        comp = plan.complement(k)
        rows0 = comp[ds.t[comp] == 0]
        rows1 = comp[ds.t[comp] == 1]
        models.append(fit_pair(ds, nuisance, xi, k=knn_k, need_p1=True,
                               rows0=rows0, rows1=rows1))
    check_no_leak(plan, models)
    return models


def stacked_nuisance_values(ds, plan: FoldPlan, fold_models):
    """Rowwise (m0, m1) where row i uses its fold's out-of-fold model."""
    X = ds.x
    m0 = np.empty(ds.n)
    m1 = np.empty(ds.n)
    for k, pair in enumerate(fold_models):
        rows = plan.rows(k)
        m0[rows] = pair.p0.predict(X[rows])
        m1[rows] = pair.p1.predict(X[rows])
    return m0, m1


def crossfit_estimate(ds, K: int, nuisance="logistic", knn_k=None,
                      opts: SolverOptions | None = None, seed: int = 0,
                      weights=None, include_naive=True, compute_se=True,
                      fixed_pair=None) -> EstimateReport:
    """Cross-fitting pipeline solving the pooled stacked equation."""
    opts = opts or SolverOptions()
    _require_both_arms(ds)
    xi = _weights(ds, weights)
    xi_norm = xi / xi.sum()
    plan = make_folds(ds, K, seed)
    fold_models = fit_fold_nuisances(ds, plan, nuisance, knn_k, xi, fixed_pair)
    m0, m1 = stacked_nuisance_values(ds, plan, fold_models)

    def residual(theta):
        return xi_norm @ s_eff_values(ds, theta, m0)

    theta, diag = _solve_multistart(residual, ds, opts)
    d_eff = delta_eff(ds, theta, None, xi, m0=m0, m1=m1)
    deltas = {"eff": d_eff, "alt": delta_alt(ds, theta, xi)}
    if include_naive:
        w_model = fit_w_model(ds, nuisance, xi, k=knn_k)
        deltas["nv1"] = delta_nv1(ds, w_model, xi)
        deltas["nv2"] = delta_nv2(ds, w_model, fold_models[0].p0, xi)

    report = EstimateReport(
        theta_hat=theta,
        delta_estimates=deltas,
        diagnostics={
            "iterations": diag.iterations,
            "residual": diag.residual,
            "warnings": diag.warnings,
            "crossfit_K": plan.K,
            "crossfit_seed": plan.seed,
            "p_hat": float((xi * ds.t).sum() / xi.sum()),
            "nuisance": nuisance,
        },
    )
    if compute_se:
        blocks = variance_blocks(ds, theta, d_eff, None, m0=m0, m1=m1)
        report.blocks = blocks
        report.se_analytic = {f"theta_{j + 1}": float(s)
                              for j, s in enumerate(blocks.se_theta())}
        report.se_analytic["delta_eff"] = blocks.se_delta()
        report.wald_theta2 = wald_theta2(theta, blocks)
        report.refresh_ci()
    return report
