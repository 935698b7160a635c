"""Control problems, time grids and trajectory simulation.

Two integrators are available:

``euler``
    Euler-Maruyama, ``X' = X + (b + sigma*u) dt + sigma*dW`` with
    ``dW ~ N(0, dt)``.

``exp_ou``
    Exponential integrator for drifts of the form ``b(x, t) = -zeta(t) x``
    with ``sigma(t) = eta*sqrt(2*zeta(t))``. The linear part is propagated
    exactly and a control held fixed over the step is integrated exactly,
    ``X' = a X + sigma*u*(1 - a)/zeta + eta*sqrt(1 - a^2)*xi`` with
    ``a = exp(-zeta dt)``. Zero control keeps ``N(0, eta^2 I)`` exactly
    stationary. Writing ``kappa = 2/(1 + a)`` and
    ``dtau = kappa^2 (1 - a^2)/(2 zeta)``, the step reads
    ``X' = a X + sigma*(u*dtau + dW)/kappa`` with ``dW ~ N(0, dtau)``, which
    is the form the Girsanov formulas need (``dtau -> dt`` as ``zeta dt -> 0``).

Every batch records ``qv_dt``, the per-step variance of the stored noise
(``dt`` for Euler, ``dtau`` for ``exp_ou``). All Girsanov quantities in
:mod:`trsoc.measures` use ``qv_dt`` in their quadratic terms, which makes the
discrete log-RNDs exact for both schemes. Running costs always integrate
with the grid step ``dt`` (left Riemann sums).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

Control = Callable[[np.ndarray, Union[float, np.ndarray]], np.ndarray]
SeedLike = Union[int, Sequence[int]]

INTEGRATORS = ("euler", "exp_ou")


class SimulationError(RuntimeError):
    """A simulated state became non-finite."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class ConfigurationError(ValueError):
    """Inconsistent problem / integrator configuration."""


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("time grid needs at least two points")
        if t[0] != 0.0:
            raise ValueError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T: float = 1.0, steps: int = 50) -> "TimeGrid":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return cls(np.linspace(0.0, T, steps + 1))

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


def _zero_cost(x, t):
    return np.zeros(x.shape[0])


def _zero_cost_grad(x, t):
    return np.zeros_like(x)


@dataclass
class SocProblem:
    """A control problem with scalar diffusion ``sigma(t)``.

    Callables act on row batches: ``x`` has shape ``(N, d)`` and ``t`` is a
    scalar or an ``(N,)`` array. ``p_0`` is ``N(init_mean, init_std^2 I)``.
    """

    name: str
    dim: int
    drift: Callable
    drift_vjp: Callable
    sigma: Callable
    terminal_cost: Callable
    terminal_cost_grad: Callable
    running_cost: Callable = _zero_cost
    running_cost_grad: Callable = _zero_cost_grad
    zero_running_cost: bool = True
    init_std: float = 1.0
    init_mean: float = 0.0
    # b(x, t) = linear_drift_diag(t) * x  (elementwise); enables the fast adjoint
    linear_drift_diag: Optional[Callable] = None
    # b(x, t) = -ou_rate(t) x and sigma = ou_eta*sqrt(2*ou_rate); enables exp_ou
    ou_rate: Optional[Callable] = None
    ou_eta: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def sigma_at(self, t) -> np.ndarray:
        s = np.asarray(self.sigma(t), dtype=np.float64)
        return s


@dataclass(frozen=True)
class TrajectoryBatch:
    """Simulated paths plus everything needed to reweight them.

    ``X`` is ``(K, J+1, d)``; ``dW`` and ``u`` (the control values used while
    simulating) are ``(K, J, d)``; ``qv_dt`` is ``(J,)``.
    """

    X: np.ndarray
    dW: np.ndarray
    u: np.ndarray
    qv_dt: np.ndarray
    grid: TimeGrid
    integrator: str
    seed: tuple

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    def subset(self, idx) -> "TrajectoryBatch":
        idx = np.asarray(idx)
        return TrajectoryBatch(
            self.X[idx], self.dW[idx], self.u[idx], self.qv_dt, self.grid,
            self.integrator, self.seed,
        )


def _seed_tuple(seed: SeedLike) -> tuple:
    if isinstance(seed, (int, np.integer)):
        return (int(seed),)
    return tuple(int(s) for s in seed)


def standard_normals(seed: SeedLike, K: int, shape: tuple) -> np.ndarray:
    """``(K, *shape)`` standard normals, one Philox stream per trajectory.

    Row ``k`` depends only on ``(seed, k)``, so prefixes of a batch are
    reproducible regardless of ``K``.
    """
    base = np.random.SeedSequence(list(_seed_tuple(seed))).generate_state(1, np.uint64)[0]
    out = np.empty((K,) + tuple(shape))
    for k in range(K):
        rng = np.random.Generator(np.random.Philox(key=[int(base), k]))
        out[k] = rng.standard_normal(shape)
    return out


def _eval_control(control, x, t, K, d):
    if control is None:
        return np.zeros((K, d))
    u = np.asarray(control(x, t), dtype=np.float64)
    if u.shape != (K, d):
        raise ValueError(f"control returned shape {u.shape}, expected {(K, d)}")
    return u


def simulate(
    problem: SocProblem,
    control: Optional[Control],
    grid: TimeGrid,
    K: int,
    seed: SeedLike,
    integrator: str = "euler",
) -> TrajectoryBatch:
    """Simulate ``K`` controlled paths on ``grid``; ``control=None`` means zero."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if integrator not in INTEGRATORS:
        raise ConfigurationError(f"unknown integrator {integrator!r}; valid: {INTEGRATORS}")
    if integrator == "exp_ou" and problem.ou_rate is None:
        raise ConfigurationError(
            f"exp_ou integrator needs an OU drift b(x,t) = -zeta(t) x; problem {problem.name!r} has none"
        )
    d = problem.dim
    J = grid.steps
    times = grid.times
    dt = grid.dt
    xi = standard_normals(seed, K, (J + 1, d))

    X = np.empty((K, J + 1, d))
    dW = np.empty((K, J, d))
    U = np.empty((K, J, d))
    X[:, 0] = problem.init_mean + problem.init_std * xi[:, 0]

    if integrator == "euler":
        qv = dt.copy()
    else:
        zeta = np.array([float(problem.ou_rate(s)) for s in times[:-1]])
        a = np.exp(-zeta * dt)
        var = -np.expm1(-2.0 * zeta * dt) / (2.0 * zeta)
        kappa = 2.0 / (1.0 + a)
        qv = kappa**2 * var

    for j in range(J):
        s = times[j]
        x = X[:, j]
        sig = problem.sigma_at(s)
        u = _eval_control(control, x, s, K, d)
        noise = np.sqrt(qv[j]) * xi[:, j + 1]
        if integrator == "euler":
            nxt = x + (problem.drift(x, s) + sig * u) * dt[j] + sig * noise
        else:
            nxt = a[j] * x + sig * (u * qv[j] + noise) / kappa[j]
        if not np.all(np.isfinite(nxt)):
            raise SimulationError(j + 1)
        X[:, j + 1] = nxt
        dW[:, j] = noise
        U[:, j] = u

    return TrajectoryBatch(X, dW, U, qv, grid, integrator, _seed_tuple(seed))
