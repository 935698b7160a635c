import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from trsoc.trustregion import (AnnealingState, DiscreteMeasure, NumericalError, RunningAverage, beta_from_lambdas,
                               discrete_tr_step, dual_derivative, dual_value, fisher_information,
                               kl_and_ess_diagnostics, kl_discrete, solve_lambda, tempered_kl, update_beta)

logw_arrays = arrays(np.float64, st.integers(2, 60), elements=st.floats(-20, 20, allow_nan=False))


def test_constant_weights_give_zero_multiplier():
    assert solve_lambda(np.full(10, 3.0), 0.1) == 0.0


def test_inactive_constraint():
    lw = np.array([0.0, 0.01, -0.01, 0.0])
    assert tempered_kl(lw, 1.0) < 0.1
    assert solve_lambda(lw, 0.1) == 0.0


@settings(max_examples=60, deadline=None)
@given(logw_arrays, st.sampled_from([0.01, 0.1, 1.0]))
def test_active_constraint_is_tight(lw, eps):
    lam = solve_lambda(lw, eps)
    assert lam >= 0
    if lam > 0:
        assert tempered_kl(lw, 1 / (1 + lam)) == pytest.approx(eps, abs=1e-8)
    else:
        assert tempered_kl(lw, 1.0) <= eps + 1e-12


@settings(max_examples=40, deadline=None)
@given(logw_arrays, st.floats(0, 50), st.floats(0.01, 1.0))
def test_dual_shift_invariance_of_argmax(lw, shift, eps):
    assert solve_lambda(lw + shift, eps) == pytest.approx(solve_lambda(lw, eps), rel=1e-7, abs=1e-9)


def test_dual_derivative_matches_finite_difference(rng):
    lw = rng.normal(size=50) * 2
    for lam in (0.1, 1.0, 5.0):
        h = 1e-6
        fd = (dual_value(lw, lam + h, 0.1) - dual_value(lw, lam - h, 0.1)) / (2 * h)
        assert dual_derivative(lw, lam, 0.1) == pytest.approx(fd, rel=1e-5, abs=1e-8)


def test_multiplier_is_dual_maximizer(rng):
    lw = rng.normal(size=100) * 3
    lam = solve_lambda(lw, 0.1)
    grid = np.linspace(max(lam - 0.5, 0), lam + 0.5, 201)
    vals = [dual_value(lw, g, 0.1) for g in grid]
    assert dual_value(lw, lam, 0.1) >= max(vals) - 1e-10


def test_lambda_decreases_with_epsilon(rng):
    lw = rng.normal(size=200) * 2
    lams = [solve_lambda(lw, e) for e in (0.01, 0.1, 0.5)]
    assert lams[0] > lams[1] > lams[2]


def test_solver_errors():
    with pytest.raises(ValueError):
        solve_lambda(np.zeros(3), 0.0)
    with pytest.raises(NumericalError):
        solve_lambda(np.array([0.0, np.nan]), 0.1)
    with pytest.raises(ValueError):
        solve_lambda(np.zeros(1), 0.1)
    with pytest.raises(ValueError):
        dual_value(np.zeros(3), -1.0, 0.1)


def test_beta_recursion_matches_product():
    lams = [4.0, 2.5, 1.0, 0.3]
    st_ = AnnealingState(0.1)
    for lam in lams:
        st_ = update_beta(st_, lam)
    assert st_.beta == pytest.approx(beta_from_lambdas(lams), abs=1e-14)
    assert st_.iteration == 4 and st_.lambdas == tuple(lams)


def test_beta_edge_cases():
    assert update_beta(AnnealingState(0.1), 0.0).beta == 1.0
    assert update_beta(AnnealingState(0.1), np.inf).beta == 0.0
    s = AnnealingState(0.1, delta=1e-3).update(5e-4)
    assert s.converged and s.beta >= 1 - 1e-3
    with pytest.raises(ValueError):
        AnnealingState(0.0)


def test_kl_and_ess_of_uniform_weights():
    kl, ess = kl_and_ess_diagnostics(np.zeros(30), 0.0)
    assert kl == pytest.approx(0.0, abs=1e-14) and ess == pytest.approx(1.0)


def test_fisher_information_conventions(rng):
    lw = rng.normal(size=1000)
    assert fisher_information(lw) == pytest.approx(np.var(lw, ddof=1))
    assert fisher_information(0.5 * lw, beta=0.5, tempered=True) == pytest.approx(np.var(lw, ddof=1))
    with pytest.raises(ValueError):
        fisher_information(lw, tempered=True)


def test_running_average_window():
    avg = RunningAverage(3)
    assert np.isnan(avg.value)
    for v in (1, 2, 3, 4):
        avg.push(v)
    assert avg.value == pytest.approx(3.0)


def test_discrete_step_basic(rng):
    q = rng.dirichlet(np.ones(6))
    rho = rng.gamma(1.0, size=6)
    m = DiscreteMeasure(q, rho)
    nxt, lam = discrete_tr_step(m, 0.05)
    assert nxt.q.sum() == pytest.approx(1.0)
    if lam > 0:
        assert kl_discrete(nxt.q, q) == pytest.approx(0.05, abs=1e-8)
    # a huge trust region jumps straight to the target
    full, lam_full = discrete_tr_step(m, 1e3)
    assert lam_full == 0.0
    np.testing.assert_allclose(full.q, m.target, atol=1e-12)


def test_discrete_step_respects_support():
    m = DiscreteMeasure(np.array([0.5, 0.5, 0.0]), np.array([1.0, 2.0, 5.0]))
    nxt, _ = discrete_tr_step(m, 0.01)
    assert nxt.q[2] == 0.0
    with pytest.raises(ValueError):
        discrete_tr_step(DiscreteMeasure(np.array([0.5, 0.5]), np.array([1.0, 0.0])), 0.1)
    with pytest.raises(ValueError):
        DiscreteMeasure(np.array([0.5, 0.6]), np.array([1.0, 1.0]))
