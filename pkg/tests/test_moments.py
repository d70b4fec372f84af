import mpmath as mp
import numpy as np
import pytest
from conftest import const_pair

from shadowatt.exceptions import NumericalBlowup
from shadowatt.moments import compute_moments, control_outcome_mean, moment_frame
from shadowatt.propensity import pi as pi_scalar

mp.mp.dps = 50


def oracle_moments(theta, u, m0, e1=None, delta=None):
    """Independent high-precision enumeration over y0 in {0, 1}."""
    theta = [mp.mpf(v) for v in theta]
    u = [mp.mpf(v) for v in u]
    m0 = mp.mpf(m0)
    probs = {0: 1 - m0, 1: m0}

    def pi_at(j):
        lp = theta[0] + theta[1] * j + mp.fsum(t * x for t, x in zip(theta[2:], u))
        return 1 / (1 + mp.e ** (-lp))

    d = 2 + len(u)
    e0_inv = mp.fsum(probs[j] / (1 - pi_at(j)) for j in (0, 1))
    e0_pi = mp.fsum(probs[j] * pi_at(j) / (1 - pi_at(j)) ** 2 for j in (0, 1))
    e0_dpi = [
        mp.fsum(probs[j] * pi_at(j) / (1 - pi_at(j)) * vec_k for j in (0, 1)
                for vec_k in [[1, j, *u][k]])
        for k in range(d)
    ]
    e0_y0pi2 = m0 * (pi_at(1) / (1 - pi_at(1))) ** 2
    w = 1 - 1 / e0_inv
    out = {
        "w": w,
        "A": [(1 - w) * v for v in e0_dpi],
        "B": (1 - w) * e0_pi,
        "e0_inv": e0_inv,
        "e0_pi": e0_pi,
        "e0_dpi": e0_dpi,
        "e0_y0pi2": e0_y0pi2,
    }
    if delta is not None:
        out["V"] = w * mp.mpf(e1) - w * mp.mpf(delta) + (1 - w) * e0_y0pi2
    return out


def test_against_enumeration_oracle():
    theta = (0.3, -0.3, -0.25)
    u, z, m0, e1, delta = [0.5], [1.2], 0.4, 0.7, 0.1
    got = compute_moments(u, z, theta, const_pair(m0, e1), delta=delta)
    want = oracle_moments(theta, u, m0, e1, delta)
    for name in ("w", "B", "e0_inv", "e0_pi", "e0_y0pi2", "V"):
        assert getattr(got, name) == pytest.approx(float(want[name]), abs=1e-12)
    np.testing.assert_allclose(got.A, [float(v) for v in want["A"]], atol=1e-12)
    np.testing.assert_allclose(got.e0_dpi, [float(v) for v in want["e0_dpi"]], atol=1e-12)
    assert got.e1_y1 == pytest.approx(e1)


def test_invariant_identities_on_random_grid():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        theta = rng.normal(scale=1.0, size=3)
        u = rng.normal(size=(1, 1))
        m0 = rng.uniform(0.05, 0.95)
        f = moment_frame(u, theta, [m0])
        assert f.e0_inv[0] >= 1.0
        assert 0.0 < f.w[0] < 1.0 and f.B[0] > 0.0
        assert f.w[0] == pytest.approx(1 - 1 / f.e0_inv[0], abs=1e-15)
        np.testing.assert_allclose(f.A[0], (1 - f.w[0]) * f.e0_dpi[0], atol=1e-13)
        assert f.B[0] == pytest.approx((1 - f.w[0]) * f.e0_pi[0], abs=1e-13)
        assert np.all(np.isfinite(f.e0_dpi))


def test_change_of_measure_identity():
    # E0[a | x] = (1-w) E0[(1-pi)^{-1} a | x, 0] for a in {1, y0, dpi},
    # with the left side enumerated under the implied unconditional law
    rng = np.random.default_rng(99)
    for _ in range(1000):
        theta = rng.normal(scale=1.2, size=3)
        uval = rng.normal()
        m0 = rng.uniform(0.02, 0.98)
        f = moment_frame(np.array([[uval]]), theta, [m0])
        pi0 = pi_scalar(0, [uval], theta)
        pi1 = pi_scalar(1, [uval], theta)
        w = f.w[0]
        implied = {0: (1 - m0) * (1 - w) / (1 - pi0), 1: m0 * (1 - w) / (1 - pi1)}
        assert implied[0] + implied[1] == pytest.approx(1.0, abs=1e-12)
        for a in (lambda j, pij: 1.0,
                  lambda j, pij: float(j),
                  lambda j, pij: pij * (1 - pij)):  # dpi intercept coordinate
            lhs = sum(implied[j] * a(j, p) / (1 - p) for j, p in ((0, pi0), (1, pi1)))
            rhs = (1 - w) * sum(
                ((1 - m0), m0)[j] * a(j, p) / (1 - p) ** 2 for j, p in ((0, pi0), (1, pi1)))
            assert lhs == pytest.approx(rhs, abs=1e-12)


def test_b_equals_conditional_variance_monte_carlo():
    # B(x) = var{(T-pi)/(1-pi) | x} under the implied joint law of (y0, T)
    theta = (0.3, -0.3, -0.25)
    uval, m0 = 0.4, 0.35
    f = moment_frame(np.array([[uval]]), theta, [m0])
    pi0 = pi_scalar(0, [uval], theta)
    pi1 = pi_scalar(1, [uval], theta)
    w = f.w[0]
    p_y0 = m0 * (1 - w) / (1 - pi1)  # implied unconditional P(Y0=1 | x)
    rng = np.random.default_rng(17)
    n = 1_000_000
    y0 = rng.random(n) < p_y0
    pis = np.where(y0, pi1, pi0)
    t = rng.random(n) < pis
    factor = (t - pis) / (1 - pis)
    assert factor.var() == pytest.approx(f.B[0], abs=1e-3)


def test_theta2_zero_collapse():
    theta = (0.4, 0.0, -0.7)
    u = np.array([[0.9]])
    m0 = 0.3
    f = moment_frame(u, theta, [m0])
    common = pi_scalar(0, [0.9], theta)
    assert f.w[0] == pytest.approx(common, abs=1e-14)
    # brackets lose their y0 dependence up to the y0 coordinate weight
    np.testing.assert_allclose(
        f.e0_dpi[0],
        common / (1 - common) * np.array([1.0, m0, 0.9]), atol=1e-14)


def test_degenerate_conditional_law_m0_one():
    theta = (0.2, -0.5, 0.3)
    u = np.array([[1.1]])
    f = moment_frame(u, theta, [1.0])
    pi1 = pi_scalar(1, [1.1], theta)
    assert f.w[0] == pytest.approx(pi1, abs=1e-14)
    assert f.e0_pi[0] == pytest.approx(pi1 / (1 - pi1) ** 2, abs=1e-12)


def test_saturation_raises():
    with pytest.raises(NumericalBlowup):
        moment_frame(np.array([[0.0]]), (40.0, 0.0, 0.0), [0.5])


def test_control_outcome_mean_change_of_measure():
    theta = (0.3, -0.3, -0.25)
    u = np.array([[0.5]])
    m0 = 0.4
    f = moment_frame(u, theta, [m0])
    pi1 = pi_scalar(1, [0.5], theta)
    expected = (1 - f.w[0]) * m0 / (1 - pi1)
    assert control_outcome_mean(u, theta, [m0])[0] == pytest.approx(expected, abs=1e-14)
