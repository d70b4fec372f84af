import numpy as np
import pytest

from shadowatt.crossfit import (check_no_leak, crossfit_estimate,
                                fit_fold_nuisances, make_folds,
                                stacked_nuisance_values)
from shadowatt.estimators import delta_eff, solve_theta_eff
from shadowatt.exceptions import InfeasibleStratification
from shadowatt.nuisance import fit_pair
from shadowatt.simulation import DgpSpec, generate, true_att_quadrature
from shadowatt.streams import stream


def small_ds(n, n_treated, seed=0):
    rng = np.random.default_rng(seed)
    t = np.zeros(n, dtype=int)
    t[:n_treated] = 1
    from shadowatt.data import Dataset

    return Dataset(t, rng.integers(0, 2, n), rng.normal(size=(n, 1)),
                   rng.normal(size=(n, 1)))


def test_fold_sizes_exact_division():
    plan = make_folds(small_ds(10, 5), K=5, seed=0)
    sizes = np.bincount(plan.assignment, minlength=5)
    assert sizes.tolist() == [2, 2, 2, 2, 2]


def test_fold_sizes_with_remainder():
    plan = make_folds(small_ds(11, 5), K=5, seed=0)
    sizes = sorted(np.bincount(plan.assignment, minlength=5).tolist())
    assert sizes == [2, 2, 2, 2, 3]


def test_arm_stratification_proportional():
    ds, _ = generate(DgpSpec(600, seed=4))
    plan = make_folds(ds, K=5, seed=9)
    treated_per_fold = [int(ds.t[plan.rows(k)].sum()) for k in range(5)]
    assert max(treated_per_fold) - min(treated_per_fold) <= 1
    for k in range(5):
        comp = plan.complement(k)
        assert ds.t[comp].sum() > 0 and (1 - ds.t[comp]).sum() > 0


def test_infeasible_stratification():
    with pytest.raises(InfeasibleStratification) as exc:
        make_folds(small_ds(40, 3), K=5, seed=0)
    assert exc.value.arm == 1 and exc.value.count == 3


def test_assignment_depends_only_on_n_k_seed():
    a = make_folds(small_ds(60, 30, seed=1), K=4, seed=7).assignment
    b = make_folds(small_ds(60, 30, seed=1), K=4, seed=7).assignment
    c = make_folds(small_ds(60, 30, seed=1), K=4, seed=8).assignment
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_leak_guard_trips_on_leaky_models():
    ds, _ = generate(DgpSpec(200, seed=5))
    plan = make_folds(ds, K=2, seed=1)
    leaky = fit_pair(ds, "logistic")  # fit on every row, including own fold
    with pytest.raises(RuntimeError, match="leak"):
        check_no_leak(plan, [leaky] * plan.K)
    clean = fit_fold_nuisances(ds, plan)  # runs its own check
    m0, m1 = stacked_nuisance_values(ds, plan, clean)
    assert m0.shape == (ds.n,) and np.all((m0 > 0) & (m0 < 1))


def test_pinned_nuisance_equals_full_sample():
    ds, _ = generate(DgpSpec(300, seed=8))
    pair = fit_pair(ds, "logistic")
    report = crossfit_estimate(ds, K=2, seed=3, fixed_pair=pair, include_naive=False)
    theta_full, _ = solve_theta_eff(ds, pair)
    np.testing.assert_allclose(report.theta_hat, theta_full, atol=1e-12)
    assert report.delta_estimates["eff"] == pytest.approx(
        delta_eff(ds, theta_full, pair), abs=1e-12)


def test_same_seed_bit_identical_reports():
    ds, _ = generate(DgpSpec(600, seed=9))
    a = crossfit_estimate(ds, K=5, seed=11)
    b = crossfit_estimate(ds, K=5, seed=11)
    assert np.array_equal(a.theta_hat, b.theta_hat)
    assert a.delta_estimates == b.delta_estimates
    assert a.se_analytic == b.se_analytic


def test_crossfit_bias_matches_full_sample_study():
    # 200 replications of the K=5 cross-fitting pipeline stay within
    # 0.015 of the full-sample study's small bias
    spec = DgpSpec(600)
    truth = true_att_quadrature(spec)
    ests = []
    for r in range(200):
        ds, _ = generate(spec, stream(500, "dgp", r))
        try:
            report = crossfit_estimate(ds, K=5, seed=r, include_naive=False,
                                       compute_se=False)
        except Exception:
            continue
        ests.append(report.delta_estimates["eff"])
    assert len(ests) >= 190
    bias = float(np.mean(ests) - truth)
    assert bias == pytest.approx(-0.003, abs=0.015)
