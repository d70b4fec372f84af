"""Command-line entry point: simulate | estimate | perturb.

Configuration is flat key = value text (# comments allowed); every key
can be overridden by the command-line flag of the same name.  Stochastic
outputs embed the seed, the RNG algorithm, and a digest of the effective
configuration so any run can be replayed.

Exit codes: 0 success, 1 config/data error, 2 degraded success (more
than 10% of replicates failed), 3 solver failure.
"""

from __future__ import annotations

import argparse
import hashlib
import math
import os
import sys
from functools import partial

import numpy as np

from . import __version__
from .crossfit import crossfit_estimate
from .data import dataset_from_columns, read_csv_columns, standardize, validate
from .estimators import estimate_all
from .exceptions import ConfigError, NonConvergence, ShadowAttError, SingularJacobian
from .inference import PerturbationConfig, cumulative_sd, make_pipeline, perturb_se
from .simulation import DgpSpec, render_table, run_study, summary_kv
from .streams import RNG_ALGORITHM

EXIT_OK, EXIT_CONFIG, EXIT_DEGRADED, EXIT_SOLVER = 0, 1, 2, 3


# ------------------------------------------------------------- config


def read_config_file(path) -> dict:
    """Flat 'key = value' lines; '#' starts a comment; blank lines skipped."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = line.split("=", 1)
                out[key.strip().replace("-", "_")] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return out


def effective_config(args: argparse.Namespace, file_cfg: dict, defaults: dict) -> dict:
    """Merge: explicit CLI flag > config-file entry > default."""
    cfg = {}
    for key, default in defaults.items():
        cli_val = getattr(args, key, None)
        if cli_val is not None:
            cfg[key] = cli_val
        elif key in file_cfg:
            cfg[key] = _coerce(file_cfg[key], default)
        else:
            cfg[key] = default
    return cfg


def _coerce(text, default):
    if isinstance(default, bool):
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int) and not isinstance(default, bool):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_digest(cfg: dict) -> str:
    canon = "".join(f"{k}={cfg[k]!r};" for k in sorted(cfg))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _provenance_lines(cfg: dict) -> list:
    return [
        f"# seed = {cfg.get('seed')}",
        f"# rng = {RNG_ALGORITHM}",
        f"# config_digest = {config_digest(cfg)}",
    ]


def _write(path, text):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _kv_header(cfg: dict) -> str:
    return (f"seed = {cfg.get('seed')}\nrng = {RNG_ALGORITHM}\n"
            f"config_digest = {config_digest(cfg)}\nversion = {__version__}\n")


def _norm_p(z):
    return math.erfc(abs(z) / math.sqrt(2.0))


# ------------------------------------------------------------ simulate


SIM_DEFAULTS = dict(n=600, reps=100, theta0="0.3,-0.3,-0.25", theta_mode="eff",
                    nuisance="logistic", estimators="eff,alt,nv1,nv2",
                    perturb=0, seed=None, threads=0, out=".")


def cmd_simulate(cfg: dict) -> int:
    if cfg["seed"] is None:
        raise ConfigError("--seed is required for simulate")
    if cfg["reps"] < 2:
        raise ConfigError("reps must be at least 2")
    theta0 = tuple(float(v) for v in str(cfg["theta0"]).split(","))
    spec = DgpSpec(int(cfg["n"]), theta0, int(cfg["seed"]))
    perturb = None
    if int(cfg["perturb"]) > 0:
        perturb = PerturbationConfig(B=int(cfg["perturb"]), seed=int(cfg["seed"]))
    threads = int(cfg["threads"]) or (os.cpu_count() or 1)
    summary = run_study(spec, int(cfg["reps"]),
                        estimators=tuple(str(cfg["estimators"]).split(",")),
                        theta_mode=str(cfg["theta_mode"]), perturb=perturb,
                        seed=int(cfg["seed"]), nuisance=str(cfg["nuisance"]),
                        threads=threads)
    os.makedirs(cfg["out"], exist_ok=True)
    table = "\n".join(_provenance_lines(cfg)) + "\n" + render_table(summary)
    _write(os.path.join(cfg["out"], "summary.txt"), table)
    _write(os.path.join(cfg["out"], "summary.kv"), _kv_header(cfg) + summary_kv(summary))
    print(table, end="")
    if summary.failed > 0.10 * summary.reps:
        print(f"warning: {summary.failed}/{summary.reps} replicates failed",
              file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


# ------------------------------------------------------------ estimate


EST_DEFAULTS = dict(data=None, t_col="t", y_col="y", u_cols=None, z_cols=None,
                    nuisance="logistic", crossfit=0, perturb=0, standardize=False,
                    stratify_by=None, seed=None, threads=0, out=".")


def _load_strata(cfg):
    if cfg["data"] is None:
        raise ConfigError("--data is required for estimate/perturb")
    if not cfg["u_cols"] or not cfg["z_cols"]:
        raise ConfigError("--u-cols and --z-cols are required")
    columns = read_csv_columns(cfg["data"])
    schema = {
        "t": cfg["t_col"], "y": cfg["y_col"],
        "u": [c.strip() for c in str(cfg["u_cols"]).split(",")],
        "z": [c.strip() for c in str(cfg["z_cols"]).split(",")],
    }
    strat = cfg["stratify_by"]
    if strat is None:
        return [("all", dataset_from_columns(columns, schema))]
    if strat not in columns:
        raise ConfigError(f"stratify-by column {strat!r} not in CSV")
    values = columns[strat]
    strata = []
    for level in sorted(set(values)):
        keep = [i for i, v in enumerate(values) if v == level]
        sub = {name: [col[i] for i in keep] for name, col in columns.items()}
        strata.append((level, dataset_from_columns(sub, schema)))
    return strata


def _estimate_one(ds, cfg):
    if cfg["standardize"]:
        ds = standardize(ds)
    threads = int(cfg["threads"]) or (os.cpu_count() or 1)
    K = int(cfg["crossfit"])
    if K > 0:
        if cfg["seed"] is None:
            raise ConfigError("--seed is required with --crossfit")
        report = crossfit_estimate(ds, K, nuisance=cfg["nuisance"],
                                   seed=int(cfg["seed"]))
    else:
        report = estimate_all(ds, nuisance=cfg["nuisance"])
    B = int(cfg["perturb"])
    result = None
    if B > 0:
        if cfg["seed"] is None:
            raise ConfigError("--seed is required with --perturb")
        if K > 0:
            pipeline = partial(_crossfit_pipeline, ds=ds, K=K, cfg=cfg)
        else:
            pipeline = make_pipeline(ds, nuisance=cfg["nuisance"])
        result = perturb_se(ds, pipeline, PerturbationConfig(B=B, seed=int(cfg["seed"])),
                            threads=threads)
        report.sd_perturb = dict(result.sd)
        report.refresh_ci()
    return ds, report, result


def _crossfit_pipeline(weights, ds, K, cfg):
    rep = crossfit_estimate(ds, K, nuisance=cfg["nuisance"], seed=int(cfg["seed"]),
                            weights=weights, compute_se=False)
    return rep.targets()


def report_tsv(report, validation=None) -> str:
    """Fixed column order: quantity, est, sd_p, se_analytic, p_value, ci lo/hi."""
    lines = ["quantity\test\tsd_p\tse_analytic\tp_value\tci95_lo\tci95_hi"]

    def fmt(v):
        return "" if v is None or (isinstance(v, float) and not np.isfinite(v)) else repr(float(v))

    for name, value in report.targets().items():
        sd_p = report.sd_perturb.get(name)
        se_a = report.se_analytic.get(name)
        sd = sd_p if sd_p is not None else se_a
        pval = _norm_p(value / sd) if sd else None
        lo, hi = report.ci_95.get(name, (None, None))
        lines.append("\t".join([name, fmt(value), fmt(sd_p), fmt(se_a),
                                fmt(pval), fmt(lo), fmt(hi)]))
    if report.wald_theta2 is not None:
        lines.append("\t".join(["wald_theta2", fmt(report.wald_theta2.statistic),
                                "", "", fmt(report.wald_theta2.p_value), "", ""]))
    if validation is not None:
        lines.append(f"# arms: treated={validation.n_treated} control={validation.n_control}"
                     f" completeness_pass={validation.completeness_heuristic_pass}"
                     f" warnings={';'.join(validation.warnings)}")
    return "\n".join(lines) + "\n"


def report_kv(report) -> str:
    kv = {}
    for name, value in report.targets().items():
        kv[f"est.{name}"] = repr(float(value))
        if name in report.sd_perturb:
            kv[f"sd_p.{name}"] = repr(float(report.sd_perturb[name]))
        if name in report.se_analytic:
            kv[f"se.{name}"] = repr(float(report.se_analytic[name]))
        if name in report.ci_95:
            lo, hi = report.ci_95[name]
            kv[f"ci95.{name}"] = f"{lo!r},{hi!r}"
    if report.wald_theta2 is not None:
        kv["wald_theta2.statistic"] = repr(report.wald_theta2.statistic)
        kv["wald_theta2.p_value"] = repr(report.wald_theta2.p_value)
    for key, value in report.diagnostics.items():
        kv[f"diag.{key}"] = str(value)
    return "".join(f"{k} = {kv[k]}\n" for k in sorted(kv))


def cmd_estimate(cfg: dict) -> int:
    strata = _load_strata(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    code = EXIT_OK
    for level, ds in strata:
        rep_v = validate(ds)
        tag = "" if len(strata) == 1 else f"_{level}"
        try:
            _, report, _ = _estimate_one(ds, cfg)
        except (NonConvergence, SingularJacobian) as exc:
            _write(os.path.join(cfg["out"], f"report{tag}.kv"),
                   _kv_header(cfg) + f"error = {type(exc).__name__}: {exc}\n"
                   + "".join(f"warning = {w}\n" for w in rep_v.warnings))
            print(f"stratum {level}: solver failure: {exc}", file=sys.stderr)
            code = EXIT_SOLVER
            continue
        tsv = "\n".join(_provenance_lines(cfg)) + "\n" + report_tsv(report, rep_v)
        _write(os.path.join(cfg["out"], f"report{tag}.tsv"), tsv)
        _write(os.path.join(cfg["out"], f"report{tag}.kv"),
               _kv_header(cfg) + report_kv(report))
        print(tsv, end="")
    return code


# ------------------------------------------------------------- perturb


def cmd_perturb(cfg: dict) -> int:
    if cfg["seed"] is None:
        raise ConfigError("--seed is required for perturb")
    if int(cfg["perturb"]) < 2:
        raise ConfigError("--perturb B must be at least 2")
    strata = _load_strata(cfg)
    os.makedirs(cfg["out"], exist_ok=True)
    code = EXIT_OK
    for level, ds in strata:
        tag = "" if len(strata) == 1 else f"_{level}"
        try:
            _, report, result = _estimate_one(ds, cfg)
        except (NonConvergence, SingularJacobian) as exc:
            print(f"stratum {level}: solver failure: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        header = "\n".join(_provenance_lines(cfg))
        _write(os.path.join(cfg["out"], f"perturb{tag}.tsv"),
               header + "\n" + report_tsv(report))
        trace = cumulative_sd(result.replicates)
        lines = ["b\t" + "\t".join(result.names)]
        for b in range(trace.shape[0]):
            cells = ["" if not np.isfinite(v) else repr(float(v)) for v in trace[b]]
            lines.append("\t".join([str(b + 1)] + cells))
        _write(os.path.join(cfg["out"], f"trace{tag}.tsv"),
               header + "\n" + "\n".join(lines) + "\n")
        _write(os.path.join(cfg["out"], f"perturb{tag}.kv"),
               _kv_header(cfg) + report_kv(report)
               + f"perturb.failed = {result.failed}\nperturb.B = {result.B}\n")
        if result.failure_fraction > 0.10:
            print(f"warning: {result.failed}/{result.B} perturbation replicates failed",
                  file=sys.stderr)
            code = EXIT_DEGRADED
    return code


# ---------------------------------------------------------------- main


def _add_common(sp):
    sp.add_argument("--seed", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--out")
    sp.add_argument("--config")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shadowatt", description=__doc__)
    sub = ap.add_subparsers(dest="subcommand", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study of the synthetic design")
    _add_common(sim)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--theta0")
    sim.add_argument("--theta-mode", dest="theta_mode",
                     choices=("eff", "truth", "arb1", "arb2"))
    sim.add_argument("--nuisance", choices=("logistic", "knn"))
    sim.add_argument("--estimators")
    sim.add_argument("--perturb", type=int)

    for name in ("estimate", "perturb"):
        sp = sub.add_parser(name)
        _add_common(sp)
        sp.add_argument("--data")
        sp.add_argument("--t-col", dest="t_col")
        sp.add_argument("--y-col", dest="y_col")
        sp.add_argument("--u-cols", dest="u_cols")
        sp.add_argument("--z-cols", dest="z_cols")
        sp.add_argument("--nuisance", choices=("logistic", "knn"))
        sp.add_argument("--crossfit", type=int)
        sp.add_argument("--perturb", type=int)
        sp.add_argument("--standardize", action="store_const", const=True)
        sp.add_argument("--stratify-by", dest="stratify_by")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    defaults = {"simulate": SIM_DEFAULTS, "estimate": EST_DEFAULTS,
                "perturb": EST_DEFAULTS}[args.subcommand]
    try:
        file_cfg = read_config_file(args.config) if args.config else {}
        cfg = effective_config(args, file_cfg, defaults)
        cfg["subcommand"] = args.subcommand
        if args.subcommand == "simulate":
            return cmd_simulate(cfg)
        if args.subcommand == "estimate":
            return cmd_estimate(cfg)
        return cmd_perturb(cfg)
    except (ConfigError, ShadowAttError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
