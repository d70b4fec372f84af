"""Perturbation-resampling standard errors.

Each replicate draws iid standard-exponential weights (unit mean, unit
variance, strictly positive) and reruns the whole weighted pipeline:
weighted nuisance refits and weighted estimating equations.  The spread
of the replicated estimates is the resampling standard deviation.
"""

from __future__ import annotations

import warnings as _warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from .estimators import estimate_all
from .exceptions import PipelineFailure, ShadowAttError
from .streams import stream

FAILURE_WARN_FRACTION = 0.10


@dataclass(frozen=True)
class PerturbationConfig:
    B: int = 200
    seed: int = 0
    refit_nuisance: bool = True
    targets: tuple | None = None  # None = everything the pipeline returns

    def __post_init__(self):
        if self.B < 2:
            raise ValueError("B must be at least 2")


@dataclass
class PerturbationResult:
    point: dict
    sd: dict
    ci_95: dict
    names: tuple
    replicates: np.ndarray  # B x len(names), NaN rows mark failures
    failed: int
    B: int

    @property
    def failure_fraction(self) -> float:
        return self.failed / self.B


def _standard_pipeline(weights, ds, nuisance, knn_k, include_naive, fixed_nuis, opts):
    if fixed_nuis is not None:
        from .estimators import delta_alt, delta_eff, solve_theta_eff

        theta, _ = solve_theta_eff(ds, fixed_nuis, opts, weights=weights)
        out = {f"theta_{j + 1}": float(v) for j, v in enumerate(theta)}
        out["delta_eff"] = delta_eff(ds, theta, fixed_nuis, weights)
        out["delta_alt"] = delta_alt(ds, theta, weights)
        return out
    report = estimate_all(ds, nuisance, knn_k, opts=opts, weights=weights,
                          include_naive=include_naive, compute_se=False)
    return report.targets()


def make_pipeline(ds, nuisance="logistic", knn_k=None, include_naive=True,
                  refit_nuisance=True):
    """Picklable weighted-estimation closure for perturb_se.

    The unit-weight solve is run once up front and its root warm-starts
    every weighted re-solve, which keeps the perturbed solves inside the
    point estimate's basin.  With refit_nuisance=False the nuisances are
    fit once on unit weights and held fixed; only the estimating
    equations are reweighted.
    """
    from .estimators import SolverOptions

    fixed = None
    if not refit_nuisance:
        from .nuisance import fit_pair

        fixed = fit_pair(ds, nuisance, None, k=knn_k, need_p1=True)
    point = _standard_pipeline(None, ds, nuisance, knn_k, include_naive, fixed, None)
    init = np.array([point[f"theta_{j + 1}"] for j in range(2 + ds.p)])
    return partial(_standard_pipeline, ds=ds, nuisance=nuisance, knn_k=knn_k,
                   include_naive=include_naive, fixed_nuis=fixed,
                   opts=SolverOptions(init=init))


def _one_replicate(b, pipeline, seed, n):
    xi = stream(seed, "perturb", b).exponential(1.0, size=n)
    try:
        return b, pipeline(xi)
    except ShadowAttError:
        return b, None


def perturb_se(ds, pipeline, cfg: PerturbationConfig, threads: int = 1) -> PerturbationResult:
    """Resampling sds: rerun pipeline under B exponential weight draws.

    pipeline(weights) must return {target: estimate}; the unit-weight run
    defines the point estimates and the target set.  Replicates whose
    solver fails are dropped and counted; more than 10% failures emits a
    warning.  Streams are keyed by replicate index, so any execution
    order (or parallel run) reproduces the same numbers.
    """
    try:
        point = pipeline(np.ones(ds.n))
    except Exception as exc:
        raise PipelineFailure(f"unit-weight pipeline run failed: {exc}") from exc
    names = tuple(point.keys()) if cfg.targets is None else tuple(cfg.targets)

    reps = np.full((cfg.B, len(names)), np.nan)
    run = partial(_one_replicate, pipeline=pipeline, seed=cfg.seed, n=ds.n)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(cfg.B)))
    else:
        results = [run(b) for b in range(cfg.B)]
    failed = 0
    for b, est in results:
        if est is None:
            failed += 1
            continue
        reps[b] = [est[k] for k in names]

    ok = reps[~np.isnan(reps).any(axis=1)]
    if failed > FAILURE_WARN_FRACTION * cfg.B:
        _warnings.warn(f"{failed}/{cfg.B} perturbation replicates failed", RuntimeWarning)
    sd_arr = ok.std(axis=0, ddof=1) if ok.shape[0] >= 2 else np.full(len(names), np.nan)
    sd = {k: float(s) for k, s in zip(names, sd_arr)}
    ci = {k: (float(point[k] - 1.96 * sd[k]), float(point[k] + 1.96 * sd[k]))
          for k in names if np.isfinite(sd[k])}
    return PerturbationResult({k: float(point[k]) for k in names}, sd, ci,
                              names, reps, failed, cfg.B)


def cumulative_sd(replicates: np.ndarray) -> np.ndarray:
    """Running sd over the first b replicates (ddof=1; NaN until b=2).

    Failed replicates (NaN rows) are skipped without advancing the count.
    """
    reps = np.atleast_2d(replicates)
    out = np.full_like(reps, np.nan, dtype=float)
    count = 0
    s1 = np.zeros(reps.shape[1])
    s2 = np.zeros(reps.shape[1])
    for b in range(reps.shape[0]):
        row = reps[b]
        if not np.isnan(row).any():
            count += 1
            s1 += row
            s2 += row ** 2
        if count >= 2:
            var = (s2 - s1 ** 2 / count) / (count - 1)
            out[b] = np.sqrt(np.maximum(var, 0.0))
    return out


def coverage_eval(estimates, sds, truth: float) -> float:
    """Fraction of replications whose 95% interval contains the truth."""
    est = np.asarray(estimates, dtype=float).ravel()
    sd = np.asarray(sds, dtype=float).ravel()
    if est.size == 0:
        raise ValueError("need at least one replication")
    lo = est - 1.96 * sd
    hi = est + 1.96 * sd
    return float(np.mean((lo <= truth) & (truth <= hi)))
