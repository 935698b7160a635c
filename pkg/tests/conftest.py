import numpy as np
import pytest

from trsoc.sde import SocProblem


def _zero(x, t=None):
    return np.zeros(x.shape[0])


def make_linear_problem(dim=1, b1=0.0, sigma=1.0, q=0.5, init_std=1.0, name="linear"):
    """``dX = (b1 X + sigma u) dt + sigma dW`` with ``g = q |x|^2``."""
    return SocProblem(
        name=name, dim=dim,
        drift=lambda x, t: b1 * x,
        drift_vjp=lambda x, t, a: b1 * a,
        sigma=lambda t: sigma * np.ones_like(np.asarray(t, dtype=np.float64)),
        terminal_cost=lambda x: q * np.sum(x * x, axis=1),
        terminal_cost_grad=lambda x: 2.0 * q * x,
        init_std=init_std,
        linear_drift_diag=lambda t: np.full(dim, b1),
    )


def make_free_problem(dim=1):
    """Brownian motion with zero cost: the optimal control is zero."""
    return SocProblem(
        name="free", dim=dim,
        drift=lambda x, t: np.zeros_like(x),
        drift_vjp=lambda x, t, a: np.zeros_like(a),
        sigma=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
        terminal_cost=_zero,
        terminal_cost_grad=lambda x: np.zeros_like(x),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
