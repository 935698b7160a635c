import numpy as np
import pytest

from conftest import make_free_problem, make_linear_problem
from trsoc.benchmarks import make_problem
from trsoc.measures import (EvaluationError, control_values, girsanov_log_rnd, log_mean_exp, self_normalize,
                            shifted_work, work)
from trsoc.sde import TimeGrid, simulate


def test_log_mean_exp_stable():
    a = np.array([1000.0, 1000.0])
    assert log_mean_exp(a) == pytest.approx(1000.0)
    assert log_mean_exp(np.array([-1e4, 0.0])) == pytest.approx(np.log(0.5))


def test_self_normalize_shift_invariant(rng):
    lw = rng.normal(size=20)
    np.testing.assert_allclose(self_normalize(lw), self_normalize(lw + 123.4), atol=1e-15)
    np.testing.assert_allclose(self_normalize(lw, 0.0), 1 / 20)


def test_rnd_of_same_control_is_zero():
    p = make_linear_problem(dim=2)
    b = simulate(p, lambda x, t: -x, TimeGrid.uniform(1.0, 10), 30, 0)
    np.testing.assert_allclose(girsanov_log_rnd(lambda x, t: 0.3 * x, lambda x, t: 0.3 * x, b), 0.0, atol=1e-14)


def test_rnd_antisymmetric_and_chain(rng):
    p = make_linear_problem(dim=2)
    b = simulate(p, lambda x, t: np.sin(x), TimeGrid.uniform(1.0, 15), 40, 1)
    u = lambda x, t: -x  # noqa: E731
    v = lambda x, t: np.full_like(x, 0.5)  # noqa: E731
    w = lambda x, t: x * t[:, None]  # noqa: E731
    uv = girsanov_log_rnd(u, v, b)
    np.testing.assert_allclose(uv, -girsanov_log_rnd(v, u, b), atol=1e-12)
    np.testing.assert_allclose(uv, girsanov_log_rnd(u, w, b) + girsanov_log_rnd(w, v, b), atol=1e-12)


def test_rnd_expectation_is_one():
    # E_v[dP^u/dP^v] = 1 for any u
    p = make_free_problem(dim=1)
    b = simulate(p, None, TimeGrid.uniform(1.0, 20), 40000, 2)
    lr = girsanov_log_rnd(lambda x, t: np.full_like(x, 0.7), None, b)
    assert np.exp(log_mean_exp(lr)) == pytest.approx(1.0, abs=0.03)


def test_constant_control_rnd_closed_form():
    # u = c, v = 0 on paths under v: log RND = c W_T - c^2 T / 2
    p = make_free_problem(dim=1)
    grid = TimeGrid.uniform(2.0, 8)
    b = simulate(p, None, grid, 10, 0)
    lr = girsanov_log_rnd(np.full((10, 8, 1), 0.4), None, b)
    np.testing.assert_allclose(lr, 0.4 * b.dW.sum(axis=(1, 2)) - 0.5 * 0.16 * 2.0, atol=1e-13)


def test_shifted_work_matches_definition():
    p = make_linear_problem(dim=2)
    ctrl = lambda x, t: -0.5 * x  # noqa: E731
    b = simulate(p, ctrl, TimeGrid.uniform(1.0, 12), 25, 4)
    U = control_values(ctrl, b)
    dt = b.grid.dt
    ref = (0.5 * np.einsum("kjd,kjd->kj", U, U) @ dt + np.einsum("kjd,kjd->k", U, b.dW) + work(b, p))
    np.testing.assert_allclose(shifted_work(b, p), ref, atol=1e-12)


def test_shifted_work_is_rnd_to_zero_control():
    # -W_i = log dQ/dP^{u_i} + const = -W + log dP^0/dP^{u_i}
    p = make_linear_problem(dim=1)
    b = simulate(p, lambda x, t: -x, TimeGrid.uniform(1.0, 10), 25, 4)
    np.testing.assert_allclose(-shifted_work(b, p), -work(b, p) + girsanov_log_rnd(None, b.u, b), atol=1e-12)


def test_work_includes_running_cost():
    p = make_problem("lqr-easy", 2)
    b = simulate(p, None, TimeGrid.uniform(1.0, 4), 3, 0)
    X = b.X
    run = sum(0.2 * np.sum(X[:, j] ** 2, axis=1) * 0.25 for j in range(4))
    np.testing.assert_allclose(work(b, p), run + 0.1 * np.sum(X[:, -1] ** 2, axis=1), atol=1e-12)


def test_work_reports_bad_trajectory():
    p = make_linear_problem(dim=1)
    p.terminal_cost = lambda x: np.where(x[:, 0] > 0, np.nan, 0.0)
    b = simulate(p, None, TimeGrid.uniform(1.0, 3), 20, 0)
    with pytest.raises(EvaluationError) as err:
        work(b, p)
    assert b.X[err.value.index, -1, 0] > 0


def test_control_values_shape_checks():
    p = make_linear_problem(dim=2)
    b = simulate(p, None, TimeGrid.uniform(1.0, 3), 4, 0)
    with pytest.raises(ValueError):
        control_values(np.zeros((4, 3, 1)), b)
    with pytest.raises(ValueError):
        control_values(lambda x, t: x[:, :1], b)
