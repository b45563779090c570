import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nowflow.solvers import (
    EVALS_PER_STEP,
    SolverConfig,
    SolverError,
    integrate,
    integrate_adaptive,
    integrate_fixed,
)

FIXED = ("euler", "midpoint", "rk4")
ALL = FIXED + ("dopri5", "adaptive_heun")


def counting(f):
    calls = [0]

    def g(z, t):
        calls[0] += 1
        return f(z, t)

    return g, calls


@pytest.mark.parametrize("method", ALL)
def test_zero_field_is_identity(method):
    z0 = np.array([1.5, -2.0])
    res = integrate(lambda z, t: np.zeros_like(z), z0, SolverConfig(method, 7))
    np.testing.assert_array_equal(res.z, z0)
    if method in ("dopri5", "adaptive_heun"):
        assert res.rejected == 0


def test_closed_form_examples():
    grow = lambda z, t: z  # noqa: E731
    assert integrate_fixed(grow, np.array([1.0]), SolverConfig("euler", 10)).z[0] == pytest.approx(1.1 ** 10, abs=1e-12)
    assert integrate_fixed(grow, np.array([1.0]), SolverConfig("rk4", 1)).z[0] == pytest.approx(1 + 1 + 1 / 2 + 1 / 6 + 1 / 24, abs=1e-12)
    assert 1.1 ** 10 == pytest.approx(2.593742, abs=1e-6)


@pytest.mark.parametrize("method,lo,hi", [("euler", 0.8, 1.2), ("midpoint", 1.8, 2.2), ("rk4", 3.7, 4.3)])
def test_convergence_order(method, lo, hi):
    steps = [5, 10, 20, 40, 80, 160]
    errs = [abs(integrate_fixed(lambda z, t: -z, np.array([1.0]), SolverConfig(method, n)).z[0] - np.exp(-1)) for n in steps]
    slope = np.polyfit(np.log(1.0 / np.array(steps)), np.log(errs), 1)[0]
    assert lo <= slope <= hi


@pytest.mark.parametrize("method", ("dopri5", "adaptive_heun"))
def test_adaptive_meets_mixed_tolerance(method):
    cfg = SolverConfig(method)
    res = integrate_adaptive(lambda z, t: -z, np.array([1.0]), cfg)
    exact = np.exp(-1)
    assert abs(res.z[0] - exact) <= cfg.atol + cfg.rtol * exact
    assert res.nfe >= (6 if method == "dopri5" else 2) * res.accepted


@pytest.mark.parametrize("method", ("dopri5", "adaptive_heun"))
def test_tightening_rtol_never_increases_error(method):
    errs = []
    for rtol in (1e-2, 1e-3, 1e-4):
        res = integrate_adaptive(lambda z, t: -z, np.array([1.0]), SolverConfig(method, rtol=rtol, atol=rtol / 10))
        errs.append(abs(res.z[0] - np.exp(-1)))
    assert errs[0] >= errs[1] >= errs[2]


def test_adaptive_lands_exactly_on_one():
    ts = []
    integrate_adaptive(lambda z, t: (ts.append(t), -z)[1], np.array([1.0]), SolverConfig("dopri5"))
    # the final step is clipped so its last stage sits on t = 1
    assert max(ts) == pytest.approx(1.0, abs=1e-15)


@given(st.sampled_from(FIXED), st.integers(1, 40))
@settings(max_examples=40, deadline=None)
def test_fixed_step_nfe_accounting(method, steps):
    f, calls = counting(lambda z, t: -z)
    res = integrate_fixed(f, np.ones(3), SolverConfig(method, steps))
    assert res.nfe == calls[0] == EVALS_PER_STEP[method] * steps


@given(st.sampled_from(("dopri5", "adaptive_heun")), st.floats(1e-5, 1e-1))
@settings(max_examples=20, deadline=None)
def test_adaptive_nfe_accounting(method, rtol):
    f, calls = counting(lambda z, t: -2 * z + np.sin(5 * t))
    res = integrate_adaptive(f, np.ones(2), SolverConfig(method, rtol=rtol, atol=rtol))
    assert res.nfe == calls[0]


def test_fixed_time_grid():
    ts = []
    integrate_fixed(lambda z, t: (ts.append(t), z * 0)[1], np.zeros(1), SolverConfig("euler", 4))
    assert ts == [0.0, 0.25, 0.5, 0.75]


@pytest.mark.parametrize("method", FIXED)
def test_linearity_in_initial_condition(method):
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 3))
    f = lambda z, t: z @ A.T  # noqa: E731
    cfg = SolverConfig(method, 13)
    a, b = rng.normal(size=3), rng.normal(size=3)
    lhs = integrate_fixed(f, 2.0 * a - 3.0 * b, cfg).z
    rhs = 2.0 * integrate_fixed(f, a, cfg).z - 3.0 * integrate_fixed(f, b, cfg).z
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


@pytest.mark.parametrize("method", ALL)
def test_constant_field_exact(method):
    c = np.array([0.3, -1.7])
    z0 = np.array([2.0, 5.0])
    res = integrate(lambda z, t: c.copy(), z0, SolverConfig(method, 9))
    np.testing.assert_allclose(res.z, z0 + c, atol=1e-12)


def test_failures_raise():
    with pytest.raises(SolverError, match="step 0"):
        integrate_fixed(lambda z, t: np.full_like(z, np.inf), np.zeros(1), SolverConfig("euler", 3))
    with pytest.raises(SolverError, match="underflow"):
        integrate_adaptive(lambda z, t: -z, np.ones(1), SolverConfig("dopri5", min_step=0.5))
    with pytest.raises(SolverError, match="max_nfe"):
        integrate_adaptive(lambda z, t: -z, np.ones(1), SolverConfig("dopri5", rtol=1e-12, atol=1e-12, max_nfe=20))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("leapfrog")
    with pytest.raises(ValueError):
        SolverConfig("euler", 0)
    with pytest.raises(ValueError):
        SolverConfig("dopri5", rtol=0)
