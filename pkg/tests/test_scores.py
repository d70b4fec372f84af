import numpy as np
import pytest
from conftest import const_pair

from shadowatt.data import Dataset, Observation
from shadowatt.estimators import variance_blocks
from shadowatt.exceptions import MissingH
from shadowatt.moments import moment_frame
from shadowatt.propensity import pi as pi_scalar
from shadowatt.scores import (ScoreContext, make_context, phi, phi_alt,
                              phi_alt_values, phi_eff, phi_eff_values,
                              phi_projection_residual, phi_values,
                              projection_residual_values, s_eff, s_eff_values,
                              treated_factor)
from shadowatt.simulation import (DgpSpec, generate, true_att_quadrature,
                                  true_nuisance_values)
from shadowatt.streams import stream

SPEC = DgpSpec(600, seed=0)
THETA0 = np.array(SPEC.theta0)


def big_sample(n, seed=123):
    """Fresh draws with oracle nuisance values at the true parameters."""
    ds, _ = generate(DgpSpec(n, seed=seed))
    m0, m1 = true_nuisance_values(SPEC, ds.x)
    return ds, m0, m1


def test_phi_hand_value():
    # theta = 0 and m0 = 1/4 pin the moments at w = 1/2, B = 1,
    # e0_y0pi2 = 1/4; with m1 = 1/2, delta = 0, p_hat = 1/2 the value is
    # 2 * (1 - (0.5*0.5 + 0.5*0.25)/1) = 1.25
    obs = Observation(1, 1, np.array([0.0]), np.array([0.0]))
    ctx = ScoreContext(np.zeros(3), delta=0.0, p_hat=0.5,
                       nuis=const_pair(0.25, 0.5))
    assert phi(obs, ctx) == pytest.approx(1.25, abs=1e-12)


def test_phi_alt_hand_values():
    theta = np.zeros(3)
    treated = Observation(1, 1, np.array([0.0]), np.array([0.0]))
    control = Observation(0, 1, np.array([0.0]), np.array([0.0]))
    assert phi_alt(treated, ScoreContext(theta, delta=1.0, p_hat=0.5)) == 0.0
    # -p^{-1} * pi/(1-pi) * y with pi = 1/2
    assert phi_alt(control, ScoreContext(theta, delta=0.3, p_hat=0.5)) == pytest.approx(-2.0)


def test_treated_factor_identity():
    ds, m0, m1 = big_sample(500)
    factor = treated_factor(ds.t, ds.y, ds.u, THETA0)
    assert np.all(factor[ds.t == 1] == 1.0)
    s = s_eff_values(ds, THETA0, m0)
    f = moment_frame(ds.u, THETA0, m0)
    ratio = f.e0_dpi / f.e0_pi[:, None]
    treated = ds.t == 1
    np.testing.assert_array_equal(s[treated], ratio[treated])
    ctx = make_context(ds, THETA0, const_pair(0.3, 0.5), delta=0.0)
    resid = projection_residual_values(ds, ctx)
    fm = moment_frame(ds.u, THETA0, np.full(ds.n, 0.3), np.full(ds.n, 0.5), 0.0)
    np.testing.assert_allclose(resid[treated],
                               (fm.V / fm.B)[treated] / ctx.p_hat, atol=1e-14)


def test_theta2_zero_collapse_of_s_eff():
    # with no outcome dependence the bracket ratio is (1-pi)*(1, m0, u),
    # so a control row's score is -pi * (1, m0, u)
    theta = np.array([0.4, 0.0, -0.6])
    uval, m0 = 0.7, 0.35
    ds = Dataset(np.array([0]), np.array([1]), np.array([[uval]]), np.array([[0.0]]))
    s = s_eff_values(ds, theta, [m0])[0]
    pival = pi_scalar(1, [uval], theta)
    np.testing.assert_allclose(s, -pival * np.array([1.0, m0, uval]), atol=1e-13)


def test_projection_identity_pointwise():
    # phi_alt = phi + residual, rowwise, for arbitrary theta/delta/nuisance
    rng = np.random.default_rng(7)
    ds, _ = generate(DgpSpec(1000, seed=21))
    m0 = rng.uniform(0.1, 0.9, ds.n)
    m1 = rng.uniform(0.1, 0.9, ds.n)
    for _ in range(5):
        theta = rng.normal(scale=0.8, size=3)
        delta = rng.normal(scale=0.5)
        ctx = make_context(ds, theta, None, delta=delta)
        gap = (phi_alt_values(ds, ctx)
               - phi_values(ds, ctx, m0, m1)
               - projection_residual_values(ds, ctx, m0, m1))
        assert np.max(np.abs(gap)) <= 1e-10


def test_single_observation_wrappers_match_arrays():
    ds, m0, m1 = big_sample(50)
    nuis = const_pair(0.3, 0.6)
    ctx = make_context(ds, THETA0, nuis, delta=0.1)
    i = 7
    obs = ds[i]
    vals0 = np.full(ds.n, 0.3)
    vals1 = np.full(ds.n, 0.6)
    assert phi(obs, ctx) == pytest.approx(phi_values(ds, ctx, vals0, vals1)[i])
    assert phi_alt(obs, ctx) == pytest.approx(phi_alt_values(ds, ctx)[i])
    np.testing.assert_allclose(s_eff(obs, ctx), s_eff_values(ds, THETA0, vals0)[i])
    assert phi_projection_residual(obs, ctx) == pytest.approx(
        projection_residual_values(ds, ctx, vals0, vals1)[i])


def test_mean_zero_at_truth():
    n = 100_000
    ds, m0, m1 = big_sample(n, seed=31)
    delta0 = true_att_quadrature(SPEC)
    ctx = make_context(ds, THETA0, None, delta=delta0)

    s = s_eff_values(ds, THETA0, m0)
    for j in range(3):
        se = s[:, j].std(ddof=1) / np.sqrt(n)
        assert abs(s[:, j].mean()) <= 3 * se

    for values in (phi_values(ds, ctx, m0, m1), phi_alt_values(ds, ctx)):
        se = values.std(ddof=1) / np.sqrt(n)
        assert abs(values.mean()) <= 3 * se

    blocks = variance_blocks(ds, THETA0, delta0, None, m0=m0, m1=m1)
    ctx_h = ScoreContext(THETA0, delta0, ctx.p_hat, None, H=blocks.H_hat)
    eff = phi_eff_values(ds, ctx_h, m0, m1)
    assert abs(eff.mean()) <= 3 * eff.std(ddof=1) / np.sqrt(n)


def test_phi_orthogonal_to_s_eff():
    n = 100_000
    ds, m0, m1 = big_sample(n, seed=57)
    delta0 = true_att_quadrature(SPEC)
    ctx = make_context(ds, THETA0, None, delta=delta0)
    values = phi_values(ds, ctx, m0, m1)
    s = s_eff_values(ds, THETA0, m0)
    for j in range(3):
        prod = values * s[:, j]
        se = prod.std(ddof=1) / np.sqrt(n)
        assert abs(prod.mean()) <= 3 * se


def test_phi_eff_variance_decomposition():
    n = 100_000
    ds, m0, m1 = big_sample(n, seed=77)
    delta0 = true_att_quadrature(SPEC)
    blocks = variance_blocks(ds, THETA0, delta0, None, m0=m0, m1=m1)
    ctx = ScoreContext(THETA0, delta0, float(ds.t.mean()), None, H=blocks.H_hat)
    var_eff = phi_eff_values(ds, ctx, m0, m1).var(ddof=1)
    var_phi = phi_values(ds, ctx, m0, m1).var(ddof=1)
    extra = float(blocks.H_hat @ blocks.M_hat @ blocks.H_hat)
    assert var_eff == pytest.approx(var_phi + extra, rel=0.02)


def test_phi_alt_no_more_efficient():
    n = 100_000
    ds, m0, m1 = big_sample(n, seed=91)
    delta0 = true_att_quadrature(SPEC)
    ctx = make_context(ds, THETA0, None, delta=delta0)
    assert (phi_alt_values(ds, ctx) ** 2).mean() >= (phi_values(ds, ctx, m0, m1) ** 2).mean()


def test_neyman_orthogonality_finite_difference():
    # derivative of the mean score in a bounded nuisance direction at r=0
    n = 100_000
    ds, m0, m1 = big_sample(n, seed=101)
    delta0 = true_att_quadrature(SPEC)
    h = 0.05 * np.cos(ds.x[:, 0]) + 0.02
    r = 1e-3
    ctx = make_context(ds, THETA0, None, delta=delta0)

    quot_s = (s_eff_values(ds, THETA0, m0 + r * h)
              - s_eff_values(ds, THETA0, m0 - r * h)) / (2 * r)
    for j in range(3):
        se = quot_s[:, j].std(ddof=1) / np.sqrt(n)
        assert abs(quot_s[:, j].mean()) <= 3 * se

    quot_phi = (phi_values(ds, ctx, m0 + r * h, m1)
                - phi_values(ds, ctx, m0 - r * h, m1)) / (2 * r)
    se = quot_phi.std(ddof=1) / np.sqrt(n)
    assert abs(quot_phi.mean()) <= 3 * se


def test_phi_eff_with_zero_h_and_missing_h():
    ds, m0, m1 = big_sample(80)
    ctx = ScoreContext(THETA0, 0.0, 0.5, None, H=np.zeros(3))
    np.testing.assert_array_equal(phi_eff_values(ds, ctx, m0, m1),
                                  phi_values(ds, ctx, m0, m1))
    obs = ds[0]
    with pytest.raises(MissingH):
        phi_eff(obs, ScoreContext(THETA0, 0.0, 0.5, const_pair(0.3, 0.5)))
