"""Benchmark problems with reference solutions.

DDS sampling problems use the ergodic OU prior
``dX = -zeta(t) X dt + eta*sqrt(2 zeta(t)) dW`` started at ``N(0, eta^2 I)``
and terminal cost ``g = log N(x; 0, eta^2 I) - log rho``. The LQR problems
have ``b = A x``, ``f = x'Px``, ``g = x'Qx`` with diagonal matrices and a
Riccati reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate

from . import _kernels
from .sde import SocProblem

PROBLEM_IDS = ("gmm2d", "gmm", "gmm40", "manywell", "lqr-easy", "lqr-hard")

LQR_PRESETS = {
    "easy": dict(a=0.2, p=0.2, q=0.1),
    "hard": dict(a=1.0, p=1.0, q=0.5),
}


class ReferenceComputationError(ArithmeticError):
    """A reference computation failed (quadrature or Riccati blow-up)."""


# -- Gaussian mixtures -----------------------------------------------------


@dataclass(frozen=True)
class GmmTarget:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.broadcast_to(np.asarray(self.variances, dtype=np.float64), mu.shape).copy()
        if w.ndim != 1 or w.size != mu.shape[0]:
            raise ValueError("one weight per component is required")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-12):
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(var <= 0):
            raise ValueError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def _log_norm(self):
        with np.errstate(divide="ignore"):
            lw = np.log(self.weights)
        return lw - 0.5 * np.sum(np.log(2.0 * np.pi * self.variances), axis=1)

    def logpdf_and_grad(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return _kernels.gmm_logpdf_grad(x, self.means, 1.0 / self.variances, self._log_norm())

    def logpdf(self, x):
        return self.logpdf_and_grad(x)[0]

    def component_logpdf(self, x):
        """``log pi_k + log N(x | mu_k, Sigma_k)`` as an ``(N, C)`` array."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None]
        return self._log_norm()[None] - 0.5 * np.sum(diff * diff / self.variances[None], axis=2)

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp]) * z


def random_gmm(dim, n_components=10, box=8.0, variance=1.0, ratio=3.0, min_separation=0.0, seed=0) -> GmmTarget:
    """Means uniform in ``[-box, box]^d``; weights rescaled so max/min equals ``ratio``.

    With ``min_separation > 0`` means are placed one at a time and redrawn
    until they keep that distance from the ones already placed.
    """
    rng = np.random.default_rng(seed)
    means = np.empty((n_components, dim))
    placed = 0
    while placed < n_components:
        for _ in range(10_000):
            c = rng.uniform(-box, box, size=dim)
            if placed == 0 or np.min(np.linalg.norm(means[:placed] - c, axis=1)) >= min_separation:
                break
        else:
            raise ValueError(f"cannot place {n_components} means {min_separation} apart in a box of half-width {box}")
        means[placed] = c
        placed += 1
    raw = rng.uniform(size=n_components)
    if n_components > 1 and ratio != 1.0:
        raw = 1.0 + (ratio - 1.0) * (raw - raw.min()) / (raw.max() - raw.min())
    else:
        raw = np.ones(n_components)
    return GmmTarget(raw / raw.sum(), means, np.full((n_components, dim), float(variance)))


# -- DDS schedule ----------------------------------------------------------


@dataclass(frozen=True)
class DdsSpec:
    eta: float = 1.0
    c_min: float = 0.01
    c_max: float = 10.0
    T: float = 1.0

    def zeta(self, t):
        t = np.asarray(t, dtype=np.float64)
        return (self.c_max - self.c_min) * np.cos(0.5 * np.pi * t / self.T) ** 2 + self.c_min

    def zeta_antiderivative(self, t):
        t = np.asarray(t, dtype=np.float64)
        T = self.T
        return (self.c_max - self.c_min) * (0.5 * t + T * np.sin(np.pi * t / T) / (2.0 * np.pi)) + self.c_min * t

    def zeta_integral(self, t0, t1):
        """``int_{t0}^{t1} zeta``."""
        return self.zeta_antiderivative(t1) - self.zeta_antiderivative(t0)

    def sigma(self, t):
        return self.eta * np.sqrt(2.0 * self.zeta(t))


def gmm_marginal(target: GmmTarget, dds: DdsSpec, t: float) -> GmmTarget:
    """Marginal of the optimal path measure at time ``t``."""
    I = float(dds.zeta_integral(t, dds.T))
    shrink = np.exp(-I)
    var = target.variances * shrink**2 + dds.eta**2 * (-np.expm1(-2.0 * I))
    return GmmTarget(target.weights, target.means * shrink, var)


def gmm_optimal_control(target: GmmTarget, dds: DdsSpec, x, t) -> np.ndarray:
    """``eta*sqrt(2 zeta(t)) * grad log(Q_t / N(0, eta^2 I))`` at rows ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],))
    out = np.empty_like(x)
    for s in np.unique(t):
        rows = t == s
        _, grad = gmm_marginal(target, dds, float(s)).logpdf_and_grad(x[rows])
        out[rows] = dds.sigma(s) * (grad + x[rows] / dds.eta**2)
    return out


# -- Many Well -------------------------------------------------------------


@lru_cache(maxsize=None)
def _double_well_log_integral(delta: float, lo: float = -10.0, hi: float = 10.0) -> float:
    val, err = integrate.quad(lambda x: np.exp(-((x * x - delta) ** 2)), lo, hi,
                              epsabs=1e-14, epsrel=1e-12, limit=500, points=[-np.sqrt(max(delta, 0.0)), np.sqrt(max(delta, 0.0))])
    if not np.isfinite(val) or val <= 0 or err > 1e-9 * val:
        raise ReferenceComputationError(f"double-well quadrature did not converge (value {val}, error {err})")
    return float(np.log(val))


@dataclass(frozen=True)
class ManyWell:
    dim: int = 5
    m: int = 5
    delta: float = 4.0

    def __post_init__(self):
        if not 0 <= self.m <= self.dim:
            raise ValueError(f"need 0 <= m <= dim, got m={self.m}, dim={self.dim}")

    def log_density(self, x):
        x = np.atleast_2d(x)
        w = x[:, : self.m]
        rest = x[:, self.m:]
        return -np.sum((w * w - self.delta) ** 2, axis=1) - 0.5 * np.sum(rest * rest, axis=1)

    def grad_log_density(self, x):
        x = np.atleast_2d(x)
        g = -x.copy()
        w = x[:, : self.m]
        g[:, : self.m] = -4.0 * w * (w * w - self.delta)
        return g

    def log_z(self) -> float:
        lz = 0.5 * (self.dim - self.m) * np.log(2.0 * np.pi)
        if self.m:
            lz += self.m * _double_well_log_integral(float(self.delta))
        return float(lz)


def manywell(m=5, delta=4.0, d=5) -> tuple[ManyWell, float]:
    mw = ManyWell(d, m, delta)
    return mw, mw.log_z()


# -- DDS problem construction ---------------------------------------------


def _gaussian_logpdf(x, eta):
    d = x.shape[1]
    return -0.5 * np.sum(x * x, axis=1) / eta**2 - 0.5 * d * np.log(2.0 * np.pi * eta**2)


def dds_problem(name, dim, log_density, grad_log_density, dds: DdsSpec, meta=None) -> SocProblem:
    eta = dds.eta

    def g(x):
        return _gaussian_logpdf(x, eta) - log_density(x)

    def grad_g(x):
        return -x / eta**2 - grad_log_density(x)

    def drift(x, t):
        return -np.reshape(dds.zeta(t), (-1, 1)) * x

    def drift_vjp(x, t, a):
        return -np.reshape(dds.zeta(t), (-1, 1)) * a

    info = dict(eta=eta, dds=dds, drift_integral=lambda s: -float(dds.zeta_integral(s, dds.T)))
    info.update(meta or {})
    return SocProblem(
        name=name, dim=dim, drift=drift, drift_vjp=drift_vjp, sigma=dds.sigma,
        terminal_cost=g, terminal_cost_grad=grad_g, init_std=eta,
        linear_drift_diag=lambda t: -dds.zeta(t), ou_rate=dds.zeta, ou_eta=eta, meta=info,
    )


def gmm_problem(target: GmmTarget, eta=2.5, T=1.0, name="gmm") -> SocProblem:
    dds = DdsSpec(eta=eta, T=T)

    def logp(x):
        return target.logpdf_and_grad(x)[0]

    def grad(x):
        return target.logpdf_and_grad(x)[1]

    return dds_problem(
        name, target.dim, logp, grad, dds,
        meta=dict(gmm=target, log_z_ref=0.0, u_star=lambda x, t: gmm_optimal_control(target, dds, x, t)),
    )


def manywell_problem(d=5, m=5, delta=4.0, eta=1.0, T=1.0) -> SocProblem:
    mw, lz = manywell(m, delta, d)
    return dds_problem("manywell", d, mw.log_density, mw.grad_log_density, DdsSpec(eta=eta, T=T),
                       meta=dict(log_z_ref=lz, manywell=mw))


# -- LQR -------------------------------------------------------------------


@dataclass(frozen=True)
class LqrSpec:
    a: np.ndarray
    p: np.ndarray
    q: np.ndarray
    T: float = 1.0
    init_std: float = 0.5

    def __post_init__(self):
        for k in ("a", "p", "q"):
            object.__setattr__(self, k, np.atleast_1d(np.asarray(getattr(self, k), dtype=np.float64)))
        if not (self.a.shape == self.p.shape == self.q.shape and self.a.ndim == 1):
            raise ValueError("a, p, q must be diagonals of equal length")
        if np.any(self.q <= 0):
            raise ValueError("Q must be positive definite")

    @classmethod
    def preset(cls, name: str, dim: int, T: float = 1.0) -> "LqrSpec":
        try:
            c = LQR_PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown LQR preset {name!r}; valid: {sorted(LQR_PRESETS)}") from None
        return cls(*(np.full(dim, c[k]) for k in ("a", "p", "q")), T=T)

    @property
    def dim(self) -> int:
        return self.a.size


@dataclass(frozen=True)
class RiccatiSolution:
    """Diagonal ``F`` on a uniform grid with linear interpolation."""

    times: np.ndarray
    F: np.ndarray
    sigma: float = 1.0
    extra: dict = field(default_factory=dict)

    def __call__(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return np.stack([np.interp(t, self.times, self.F[:, i]) for i in range(self.F.shape[1])], axis=-1)

    def control(self, x, t):
        x = np.atleast_2d(x)
        F = self(np.broadcast_to(np.asarray(t, dtype=np.float64), (x.shape[0],)))
        return -2.0 * self.sigma * F * x

    def cost_to_go_offset(self) -> float:
        """``int_0^T tr(sigma sigma' F) dt`` (trapezoidal)."""
        return float(self.sigma**2 * integrate.trapezoid(self.F.sum(axis=1), self.times))


def riccati_reference(spec: LqrSpec, n: int = 10_000) -> RiccatiSolution:
    F, bad = _kernels.riccati_rk4_diag(spec.a, spec.p, spec.q, np.ones_like(spec.a), spec.T, n)
    times = np.linspace(0.0, spec.T, n + 1)
    if bad >= 0:
        raise ReferenceComputationError(f"Riccati solution blew up (|F| > 1e6) at t = {times[bad]:.6g}")
    return RiccatiSolution(times, F)


def lqr_log_z(spec: LqrSpec, sol: RiccatiSolution) -> float:
    """``log E_{x0}[exp(-V(x0, 0))]`` with ``V = x'F(0)x + int tr F``."""
    F0 = sol.F[0]
    return float(-0.5 * np.sum(np.log1p(2.0 * spec.init_std**2 * F0)) - sol.cost_to_go_offset())


def lqr_problem(spec: LqrSpec, n_riccati: int = 10_000, name="lqr") -> SocProblem:
    a, p, q = spec.a, spec.p, spec.q
    sol = riccati_reference(spec, n_riccati)
    return SocProblem(
        name=name, dim=spec.dim,
        drift=lambda x, t: a * x,
        drift_vjp=lambda x, t, v: a * v,
        sigma=lambda t: np.ones_like(np.asarray(t, dtype=np.float64)),
        terminal_cost=lambda x: np.sum(q * x * x, axis=1),
        terminal_cost_grad=lambda x: 2.0 * q * x,
        running_cost=lambda x, t: np.sum(p * x * x, axis=1),
        running_cost_grad=lambda x, t: 2.0 * p * x,
        zero_running_cost=False,
        init_std=spec.init_std,
        linear_drift_diag=lambda t: a,
        meta=dict(eta=1.0, lqr=spec, riccati=sol, u_star=sol.control, log_z_ref=lqr_log_z(spec, sol)),
    )


# -- registry --------------------------------------------------------------


def make_problem(problem_id: str, dim=None, T=1.0, problem_seed=0, gmm_box=8.0, gmm_components=10,
                 gmm_variance=1.0, gmm_separation=3.5) -> SocProblem:
    """Build a registered benchmark; ``dim=None`` picks the preset dimension."""
    if problem_id == "gmm2d":
        if dim not in (None, 2):
            raise ValueError("gmm2d is two-dimensional")
        tgt = random_gmm(2, gmm_components, gmm_box, gmm_variance, min_separation=gmm_separation, seed=problem_seed)
        return gmm_problem(tgt, eta=2.5, T=T, name="gmm2d")
    if problem_id == "gmm":
        tgt = random_gmm(dim or 2, gmm_components, gmm_box, gmm_variance, min_separation=gmm_separation, seed=problem_seed)
        return gmm_problem(tgt, eta=2.5, T=T, name="gmm")
    if problem_id == "gmm40":
        tgt = random_gmm(dim or 2, 40, 40.0, 1.0, ratio=1.0, seed=problem_seed)
        return gmm_problem(tgt, eta=30.0, T=T, name="gmm40")
    if problem_id == "manywell":
        d = dim or 5
        return manywell_problem(d=d, m=min(5, d), T=T)
    if problem_id in ("lqr-easy", "lqr-hard"):
        spec = LqrSpec.preset(problem_id.split("-")[1], dim or 1, T=T)
        return lqr_problem(spec, name=problem_id)
    raise ValueError(f"unknown problem {problem_id!r}; valid: {', '.join(PROBLEM_IDS)}")
