"""Synthetic data-generating process, truth oracles, and the study runner.

The design: bivariate standard-normal covariates, Bernoulli potential
outcomes with success probabilities expit(x1) (treated) and expit(x2)
(untreated), and treatment drawn from expit(th1 + th2*y0 + th3*x1).
The second covariate never enters the treatment law, making it the
shadow column by construction.  u = x1, z = x2.

The latent potential-outcome pairs live in a separate Latents object
returned alongside the Dataset; estimator entry points accept only the
Dataset, so the truth cannot leak into estimation.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .estimators import (SolverOptions, delta_alt, delta_eff, delta_nv1,
                         delta_nv2, estimate_all, fit_w_model, make_g_mixed,
                         make_g_poly, solve_theta_eff, solve_theta_with_g)
from .exceptions import ShadowAttError
from .inference import PerturbationConfig, coverage_eval, perturb_se
from .nuisance import fit_pair
from .propensity import expit
from .scores import treated_factor
from .streams import RNG_ALGORITHM, stream, substream_seed

THETA_MODES = ("eff", "truth", "arb1", "arb2")
DELTA_NAMES = ("eff", "alt", "nv1", "nv2")


@dataclass(frozen=True)
class DgpSpec:
    n: int = 600
    theta0: tuple = (0.3, -0.3, -0.25)
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if len(self.theta0) != 3:
            raise ValueError("theta0 must have length 3 (intercept, y0, x1)")


@dataclass(frozen=True)
class Latents:
    """Oracle-only side channel; never handed to estimators."""

    y1: np.ndarray
    y0: np.ndarray


def generate(spec: DgpSpec, rng=None):
    """Draw one dataset; returns (Dataset, Latents).

    Draw order is fixed (x, y1, y0, t) so a given stream always produces
    the same sample.
    """
    rng = stream(spec.seed, "dgp") if rng is None else rng
    th = np.asarray(spec.theta0, dtype=float)
    x = rng.standard_normal((spec.n, 2))
    y1 = (rng.random(spec.n) < expit(x[:, 0])).astype(np.int64)
    y0 = (rng.random(spec.n) < expit(x[:, 1])).astype(np.int64)
    p_treat = expit(th[0] + th[1] * y0 + th[2] * x[:, 0])
    t = (rng.random(spec.n) < p_treat).astype(np.int64)
    y = t * y1 + (1 - t) * y0
    ds = Dataset(t, y, x[:, :1], x[:, 1:], ("x1",), ("x2",))
    return ds, Latents(y1, y0)


def true_nuisance_values(spec: DgpSpec, X):
    """Oracle conditional means (m0, m1) at each row of X = (x1, x2).

    m0 is the control-arm mean P(Y0=1 | x, T=0), which tilts the marginal
    law expit(x2) by the treatment model; m1 = E(Y1 | x, T=1) = expit(x1)
    because Y1 is independent of T given x in this design.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    th = np.asarray(spec.theta0, dtype=float)
    q = expit(X[:, 1])
    pi0 = expit(th[0] + th[2] * X[:, 0])
    pi1 = expit(th[0] + th[1] + th[2] * X[:, 0])
    one_minus_w = (1.0 - q) * (1.0 - pi0) + q * (1.0 - pi1)
    m0 = q * (1.0 - pi1) / one_minus_w
    m1 = expit(X[:, 0])
    return m0, m1


def true_marginal_treated(spec: DgpSpec, nodes: int = 80) -> float:
    """pr(T=1) under the design, by Gauss-Hermite quadrature."""
    xg, wg = _hermite(nodes)
    th = np.asarray(spec.theta0, dtype=float)
    q = expit(xg)[None, :]          # P(y0=1 | x2) over x2 nodes
    pi0 = expit(th[0] + th[2] * xg)[:, None]
    pi1 = expit(th[0] + th[1] + th[2] * xg)[:, None]
    wbar = (1.0 - q) * pi0 + q * pi1
    return float(wg @ wbar @ wg)


def _hermite(nodes):
    # physicists' Gauss-Hermite mapped to the standard normal measure
    xg, wg = np.polynomial.hermite.hermgauss(nodes)
    return xg * np.sqrt(2.0), wg / np.sqrt(np.pi)


def true_att_quadrature(spec: DgpSpec, nodes: int = 80) -> float:
    """Semi-analytic truth: 2-D quadrature over the four (y1, y0) cells."""
    xg, wg = _hermite(nodes)
    th = np.asarray(spec.theta0, dtype=float)
    p1 = expit(xg)[:, None]         # P(y1=1 | x1), x1 on axis 0
    q1 = expit(xg)[None, :]         # P(y0=1 | x2), x2 on axis 1
    num = np.zeros((nodes, nodes))
    den = np.zeros((nodes, nodes))
    for y1 in (0, 1):
        for y0 in (0, 1):
            prob = (p1 if y1 else 1.0 - p1) * (q1 if y0 else 1.0 - q1)
            pi = expit(th[0] + th[1] * y0 + th[2] * xg)[:, None]
            num += prob * pi * (y1 - y0)
            den += prob * pi
    total_num = float(wg @ num @ wg)
    total_den = float(wg @ den @ wg)
    return total_num / total_den


def true_att_mc(spec: DgpSpec, mc_size: int, seed: int | None = None):
    """Brute-force truth: mean(y1 - y0 | t=1) over fresh latent draws.

    Returns (att, standard error).  Draws are chunked so 1e7 fits in memory.
    """
    if mc_size < 10_000:
        raise ValueError("mc_size must be at least 1e4")
    rng = stream(spec.seed if seed is None else seed, "truth")
    th = np.asarray(spec.theta0, dtype=float)
    s_t = s_td = s_td2 = 0.0
    done = 0
    while done < mc_size:
        m = min(1_000_000, mc_size - done)
        x = rng.standard_normal((m, 2))
        y1 = rng.random(m) < expit(x[:, 0])
        y0 = rng.random(m) < expit(x[:, 1])
        t = rng.random(m) < expit(th[0] + th[1] * y0 + th[2] * x[:, 0])
        d = y1.astype(float) - y0.astype(float)
        s_t += t.sum()
        s_td += (t * d).sum()
        s_td2 += (t * d * d).sum()
        done += m
    att = s_td / s_t
    # delta-method se of the ratio estimator
    var_num = (s_td2 - 2.0 * att * s_td + att * att * s_t) / mc_size
    se = np.sqrt(var_num / mc_size) / (s_t / mc_size)
    return float(att), float(se)


def true_att(spec: DgpSpec, mc_size: int = 1_000_000, seed: int | None = None) -> float:
    """Monte-Carlo truth value (see true_att_mc for the standard error)."""
    return true_att_mc(spec, mc_size, seed)[0]


# ------------------------------------------------------------ study runner


@dataclass(frozen=True)
class EstimatorStats:
    bias: float
    sd: float
    mse: float
    mean_sd_p: float = float("nan")
    coverage: float = float("nan")
    n_used: int = 0


@dataclass
class SimSummary:
    spec: DgpSpec
    reps: int
    failed: int
    truth: float
    truth_mc: float
    truth_mc_se: float
    theta_mode: str
    nuisance: str
    delta_stats: dict = field(default_factory=dict)
    theta_stats: dict = field(default_factory=dict)
    re_alt_over_eff: float = float("nan")
    seed: int = 0
    rng_algorithm: str = RNG_ALGORITHM
    runtime_s: float = 0.0
    failures: tuple = ()


def _solve_theta_for_mode(ds, nuis, mode, theta0, opts):
    if mode == "truth":
        return np.asarray(theta0, dtype=float)
    if mode == "eff":
        return solve_theta_eff(ds, nuis, opts)[0]
    if mode == "arb1":
        return solve_theta_with_g(ds, make_g_poly(ds, nuis), opts)[0]
    if mode == "arb2":
        return solve_theta_with_g(ds, make_g_mixed(ds, nuis), opts)[0]
    raise ValueError(f"unknown theta mode {mode!r}")


def _study_pipeline(weights, ds, theta_mode, theta0, nuisance, knn_k, selection, opts):
    """Weighted estimation for one replicate; returns {target: value}."""
    need_p1 = "eff" in selection
    nuis = fit_pair(ds, nuisance, weights, k=knn_k, need_p1=need_p1)
    if theta_mode == "eff":
        theta = solve_theta_eff(ds, nuis, opts, weights)[0]
    elif theta_mode == "truth":
        theta = np.asarray(theta0, dtype=float)
    elif theta_mode == "arb1":
        theta = solve_theta_with_g(ds, make_g_poly(ds, nuis, weights), opts, weights)[0]
    else:
        theta = solve_theta_with_g(ds, make_g_mixed(ds, nuis, weights), opts, weights)[0]
    out = {}
    if theta_mode != "truth":
        out.update({f"theta_{j + 1}": float(v) for j, v in enumerate(theta)})
    if "eff" in selection:
        out["delta_eff"] = delta_eff(ds, theta, nuis, weights)
    if "alt" in selection:
        out["delta_alt"] = delta_alt(ds, theta, weights)
    if "nv1" in selection or "nv2" in selection:
        w_model = fit_w_model(ds, nuisance, weights, k=knn_k)
        if "nv1" in selection:
            out["delta_nv1"] = delta_nv1(ds, w_model, weights)
        if "nv2" in selection:
            out["delta_nv2"] = delta_nv2(ds, w_model, nuis.p0, weights)
    return out


def _run_rep(args):
    (r, spec, seed, theta_mode, nuisance, knn_k, selection, opts, perturb) = args
    ds, _ = generate(spec, stream(seed, "dgp", r))
    try:
        point = _study_pipeline(None, ds, theta_mode, spec.theta0, nuisance,
                                knn_k, selection, opts)
    except ShadowAttError as exc:
        return r, None, None, f"{type(exc).__name__}: {exc}"
    sds = None
    if perturb is not None:
        from functools import partial

        # warm-start weighted re-solves at this replicate's point root
        w_opts = opts
        if theta_mode != "truth":
            init = np.array([point[f"theta_{j + 1}"] for j in range(2 + ds.p)])
            w_opts = replace(opts, init=init)
        pipeline = partial(_study_pipeline, ds=ds, theta_mode=theta_mode,
                           theta0=spec.theta0, nuisance=nuisance, knn_k=knn_k,
                           selection=selection, opts=w_opts)
        cfg = replace(perturb, seed=substream_seed(seed, "perturb", r))
        try:
            res = perturb_se(ds, pipeline, cfg)
            sds = res.sd
        except ShadowAttError as exc:
            return r, None, None, f"perturb {type(exc).__name__}: {exc}"
    return r, point, sds, None


def run_study(spec: DgpSpec, reps: int, estimators=DELTA_NAMES, theta_mode="eff",
              perturb: PerturbationConfig | None = None, seed: int | None = None,
              nuisance: str = "logistic", knn_k=None,
              opts: SolverOptions | None = None, threads: int = 1) -> SimSummary:
    """Replicate the design, estimate, and aggregate bias/sd/coverage/RE.

    Failed replicates are excluded from the statistics but counted and
    listed in the summary.  Aggregation is order-invariant, and each
    replicate owns an independent substream, so threads only change the
    wall clock.
    """
    if reps < 2:
        raise ValueError("reps must be at least 2")
    if theta_mode not in THETA_MODES:
        raise ValueError(f"theta_mode must be one of {THETA_MODES}")
    selection = tuple(e for e in DELTA_NAMES if e in set(estimators))
    seed = spec.seed if seed is None else int(seed)
    opts = opts or SolverOptions()
    start = time.perf_counter()

    truth = true_att_quadrature(spec)
    truth_mc, truth_mc_se = true_att_mc(spec, 1_000_000, seed=seed)

    tasks = [(r, spec, seed, theta_mode, nuisance, knn_k, selection, opts, perturb)
             for r in range(reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_run_rep, tasks, chunksize=8))
    else:
        results = [_run_rep(t) for t in tasks]

    points, sd_rows, failures = {}, {}, []
    for r, point, sds, err in sorted(results):
        if err is not None:
            failures.append((r, err))
            continue
        points[r] = point
        if sds is not None:
            sd_rows[r] = sds
    used = sorted(points)

    summary = SimSummary(
        spec=spec, reps=reps, failed=len(failures), truth=truth,
        truth_mc=truth_mc, truth_mc_se=truth_mc_se, theta_mode=theta_mode,
        nuisance=nuisance, seed=seed, failures=tuple(failures),
    )

    def collect(name, true_value):
        est = np.array([points[r][name] for r in used])
        bias = float(est.mean() - true_value)
        sd = float(est.std(ddof=1))
        mse = float(np.mean((est - true_value) ** 2))
        mean_sdp = float("nan")
        cover = float("nan")
        have_sd = [r for r in used if r in sd_rows and name in sd_rows[r]]
        if have_sd:
            sdp = np.array([sd_rows[r][name] for r in have_sd])
            mean_sdp = float(np.nanmean(sdp))
            sub = np.array([points[r][name] for r in have_sd])
            cover = coverage_eval(sub, sdp, true_value)
        return EstimatorStats(bias, sd, mse, mean_sdp, cover, len(est))

    for name in selection:
        summary.delta_stats[name] = collect(f"delta_{name}", truth)
    if theta_mode != "truth":
        for j in range(3):
            summary.theta_stats[f"theta_{j + 1}"] = collect(f"theta_{j + 1}",
                                                            spec.theta0[j])
    if "eff" in selection and "alt" in selection:
        eff_mse = summary.delta_stats["eff"].mse
        if eff_mse > 0:
            summary.re_alt_over_eff = summary.delta_stats["alt"].mse / eff_mse
    summary.runtime_s = time.perf_counter() - start
    return summary


# ----------------------------------------------------------- rendering


def render_table(summary: SimSummary) -> str:
    """Aligned text table mirroring the simulation-report layout."""
    rows = [("estimator", "bias", "sd", "mean_sd_p", "coverage", "mse")]

    def fmt(v):
        return "-" if not np.isfinite(v) else f"{v:.4f}"

    for name, st in summary.theta_stats.items():
        rows.append((name, fmt(st.bias), fmt(st.sd), fmt(st.mean_sd_p),
                     fmt(st.coverage), fmt(st.mse)))
    for name, st in summary.delta_stats.items():
        rows.append((f"delta_{name}", fmt(st.bias), fmt(st.sd), fmt(st.mean_sd_p),
                     fmt(st.coverage), fmt(st.mse)))
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(widths[j]) for j, cell in enumerate(row)).rstrip()
             for row in rows]
    head = [
        f"n={summary.spec.n} reps={summary.reps} failed={summary.failed} "
        f"theta_mode={summary.theta_mode} nuisance={summary.nuisance}",
        f"truth={summary.truth:.6f} (mc {summary.truth_mc:.6f} "
        f"se {summary.truth_mc_se:.6f})",
    ]
    if np.isfinite(summary.re_alt_over_eff):
        head.append(f"RE(alt/eff)={summary.re_alt_over_eff:.4f}")
    return "\n".join(head + lines) + "\n"


def summary_kv(summary: SimSummary) -> str:
    """Flat machine-readable key=value document (sorted keys)."""
    kv = {
        "n": summary.spec.n,
        "reps": summary.reps,
        "failed": summary.failed,
        "theta_mode": summary.theta_mode,
        "nuisance": summary.nuisance,
        "seed": summary.seed,
        "rng": summary.rng_algorithm,
        "truth": repr(summary.truth),
        "truth_mc": repr(summary.truth_mc),
        "truth_mc_se": repr(summary.truth_mc_se),
        "theta0": ",".join(repr(v) for v in summary.spec.theta0),
    }
    if np.isfinite(summary.re_alt_over_eff):
        kv["re_alt_over_eff"] = repr(summary.re_alt_over_eff)
    for group in (summary.theta_stats, summary.delta_stats):
        for name, st in group.items():
            prefix = name if name.startswith("theta") else f"delta_{name}"
            kv[f"{prefix}.bias"] = repr(st.bias)
            kv[f"{prefix}.sd"] = repr(st.sd)
            kv[f"{prefix}.mse"] = repr(st.mse)
            if np.isfinite(st.mean_sd_p):
                kv[f"{prefix}.mean_sd_p"] = repr(st.mean_sd_p)
            if np.isfinite(st.coverage):
                kv[f"{prefix}.coverage"] = repr(st.coverage)
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))
