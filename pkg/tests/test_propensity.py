import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shadowatt.exceptions import DimensionMismatch
from shadowatt.propensity import expit, pi, pi_both, pi_gradient


def test_pi_zero_theta_is_half():
    assert pi(1, [3.7], (0.0, 0.0, 0.0)) == 0.5


def test_pi_reference_values():
    # high-precision logistic oracle for expit(0.3)
    expected = 1.0 / (1.0 + np.exp(-np.longdouble(0.3)))
    got = pi(0, [0.0], (0.3, -0.3, -0.25))
    assert got == pytest.approx(float(expected), rel=1e-14)
    # intercept and outcome coefficient cancel at y0 = 1
    assert pi(1, [0.0], (0.3, -0.3, -0.25)) == 0.5


def test_gradient_quarter_at_zero():
    np.testing.assert_allclose(pi_gradient(1, [2.0], (0.0, 0.0, 0.0)),
                               0.25 * np.array([1.0, 1.0, 2.0]), rtol=1e-15)


def test_gradient_matches_finite_differences():
    # central finite-difference oracle over a randomized grid
    rng = np.random.default_rng(42)
    h = 1e-6
    for _ in range(100):
        p = rng.integers(1, 4)
        theta = rng.normal(scale=1.5, size=2 + p)
        u = rng.normal(size=p)
        y0 = int(rng.integers(0, 2))
        grad = pi_gradient(y0, u, theta)
        for k in range(2 + p):
            e = np.zeros(2 + p)
            e[k] = h
            fd = (pi(y0, u, theta + e) - pi(y0, u, theta - e)) / (2 * h)
            # abs floor covers FD roundoff, ~eps/(2h) when pi saturates
            assert grad[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_saturated_gradient_is_tiny_without_overflow():
    with np.errstate(over="raise"):
        grad = pi_gradient(0, [0.0], (30.0, 0.0, 0.0))
    assert np.all(np.abs(grad) < 1e-12)


def test_strict_bounds_up_to_700():
    for lp in (-700.0, -30.0, 0.0, 30.0, 700.0):
        value = pi(0, [0.0], (lp, 0.0, 0.0))
        assert 0.0 < value < 1.0


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        pi(1, [1.0, 2.0], (0.0, 0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0.1, 4),
       st.floats(0.05, 2))
def test_monotone_in_each_coefficient(th1, th2, th3, u1, bump):
    # positive regressor paired with a larger coefficient raises pi
    base = (th1, th2, th3)
    assert pi(1, [u1], (th1 + bump, th2, th3)) > pi(1, [u1], base)
    assert pi(1, [u1], (th1, th2 + bump, th3)) > pi(1, [u1], base)
    assert pi(1, [u1], (th1, th2, th3 + bump)) > pi(1, [u1], base)


def test_pi_both_agrees_with_scalar():
    theta = (0.3, -0.3, -0.25)
    u = np.array([[0.5], [-1.0]])
    pi0, pi1 = pi_both(u, theta)
    assert pi0[0] == pi(0, [0.5], theta) and pi1[1] == pi(1, [-1.0], theta)


def test_expit_strictly_inside_unit_interval():
    out = expit(np.array([-1e4, -750.0, 0.0, 750.0, 1e4]))
    assert np.all(out > 0) and np.all(out < 1)
