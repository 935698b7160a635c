"""Dual function, multiplier solver, annealing schedule and diagnostics.

Given log importance weights ``logw = log dQ/dP^{u_i}`` (up to a constant)
on samples of the current iterate, the next iterate is the tempered
reweighting ``dP^{u_{i+1}}/dP^{u_i} ∝ exp(logw / (1 + lam))`` where ``lam``
maximizes the concave dual

    D(lam) = -(1 + lam) * log E[exp(logw / (1 + lam))] - lam * eps.

Its derivative is ``KL(c) - eps`` with ``c = 1/(1+lam)`` and ``KL(c)`` the
divergence of the tempered reweighting from the sampling measure, which is
increasing in ``c``. The solver therefore root-finds ``KL(c) = eps`` in
``theta = log(1 + lam)``, and returns ``lam = 0`` when ``KL(1) <= eps``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.optimize import brentq

from .measures import log_mean_exp

THETA_MAX = 40.0


class NumericalError(FloatingPointError):
    pass


def _as_logw(logw, minimum=2):
    lw = np.asarray(logw, dtype=np.float64).ravel()
    if lw.size < minimum:
        raise ValueError(f"need at least {minimum} log-weights, got {lw.size}")
    if not np.all(np.isfinite(lw)):
        raise NumericalError("non-finite log-weights")
    return lw


def _base(base, n):
    if base is None:
        return None
    b = np.asarray(base, dtype=np.float64).ravel()
    if b.shape != (n,):
        raise ValueError("base weights must match logw")
    return b / b.sum()


def _lme(z, base):
    if base is None:
        return log_mean_exp(z)
    return log_mean_exp(z, base)


def dual_value(logw, lam: float, epsilon: float, base=None) -> float:
    """Dual function at ``lam``; ``base`` are optional sampling probabilities."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    lw = _as_logw(logw)
    b = _base(base, lw.size)
    return -(1.0 + lam) * _lme(lw / (1.0 + lam), b) - lam * epsilon


def tempered_kl(logw, temper: float, base=None) -> float:
    """KL of ``∝ base * exp(temper*logw)`` from ``base`` (uniform by default)."""
    lw = np.asarray(logw, dtype=np.float64).ravel()
    b = _base(base, lw.size)
    z = temper * lw
    zm = z - z.max()
    e = np.exp(zm) if b is None else b * np.exp(zm)
    w = e / e.sum()
    return float(np.dot(w, z) - _lme(z, b))


def dual_derivative(logw, lam: float, epsilon: float, base=None) -> float:
    return tempered_kl(logw, 1.0 / (1.0 + lam), base) - epsilon


def solve_lambda(logw, epsilon: float, base=None) -> float:
    """Maximizer ``lam* >= 0`` of :func:`dual_value`."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    lw = _as_logw(logw)
    b = _base(base, lw.size)
    if np.ptp(lw) == 0.0:
        return 0.0

    def g(theta):
        val = tempered_kl(lw, np.exp(-theta), b) - epsilon
        if not np.isfinite(val):
            raise NumericalError(f"non-finite dual derivative at theta={theta}")
        return val

    g0 = g(0.0)
    if g0 <= 0.0:
        return 0.0
    if g(THETA_MAX) >= 0.0:
        raise NumericalError("trust region too small for the lambda search interval")
    theta = brentq(g, 0.0, THETA_MAX, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    return float(np.expm1(theta))


def beta_from_lambdas(lambdas) -> float:
    """``1 - prod_j lam_j / (1 + lam_j)`` (empty product gives 0)."""
    prod = 1.0
    for lam in lambdas:
        prod *= 1.0 if np.isinf(lam) else lam / (1.0 + lam)
    return 1.0 - prod


@dataclass(frozen=True)
class AnnealingState:
    epsilon: float
    delta: float = 1e-3
    iteration: int = 0
    lambdas: tuple = ()
    beta: float = 0.0

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")

    def update(self, lam: float) -> "AnnealingState":
        return update_beta(self, lam)

    @property
    def converged(self) -> bool:
        return bool(self.lambdas) and self.lambdas[-1] <= self.delta


def update_beta(state: AnnealingState, lam: float) -> AnnealingState:
    """Incremental annealing update ``beta += (1 - beta) / (1 + lam)``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    step = 0.0 if np.isinf(lam) else (1.0 - state.beta) / (1.0 + lam)
    return replace(
        state,
        iteration=state.iteration + 1,
        lambdas=state.lambdas + (float(lam),),
        beta=state.beta + step,
    )


def fisher_information(logw, beta: Optional[float] = None, tempered: bool = False) -> float:
    """Fisher information of the annealing family at the current iterate.

    ``logw`` holds ``log dQ/dP^{u_0}`` on samples of the current iterate, and
    the estimate is their sample variance. With ``tempered=True`` the input is
    ``log dQ^{(beta)}/dP^{u_0}`` instead and the variance is divided by
    ``beta**2``.
    """
    lw = np.asarray(logw, dtype=np.float64).ravel()
    if lw.size < 2:
        raise ValueError("need at least 2 samples")
    var = float(np.var(lw, ddof=1))
    if tempered:
        if beta is None or beta <= 0:
            raise ValueError("tempered estimate needs beta > 0")
        return var / beta**2
    return var


def kl_and_ess_diagnostics(logw, lam: float) -> tuple[float, float]:
    """KL estimate of the tempered step and its normalized ESS in ``(0, 1]``."""
    lw = np.asarray(logw, dtype=np.float64).ravel()
    temper = 1.0 / (1.0 + lam)
    z = temper * lw
    z = z - z.max()
    w = np.exp(z)
    w /= w.sum()
    ess = 1.0 / (lw.size * np.dot(w, w))
    return tempered_kl(lw, temper), float(min(ess, 1.0))


@dataclass
class RunningAverage:
    window: int = 5
    _values: deque = field(default_factory=deque, repr=False)

    def push(self, value: float) -> float:
        self._values.append(float(value))
        while len(self._values) > self.window:
            self._values.popleft()
        return self.value

    @property
    def value(self) -> float:
        return float(np.mean(self._values)) if self._values else float("nan")


# -- exact finite-support trust region ------------------------------------


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probabilities ``q`` on ``m`` points and an unnormalized target ``rho``."""

    q: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64)
        rho = np.asarray(self.rho, dtype=np.float64)
        if q.shape != rho.shape or q.ndim != 1:
            raise ValueError("q and rho must be 1-D arrays of equal length")
        if np.any(q < 0) or not np.isclose(q.sum(), 1.0, atol=1e-12):
            raise ValueError("q must be a probability vector")
        if np.any(rho < 0):
            raise ValueError("rho must be nonnegative")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "rho", rho)

    @property
    def target(self) -> np.ndarray:
        return self.rho / self.rho.sum()


def kl_discrete(p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = p > 0
    return float(np.sum(p[m] * (np.log(p[m]) - np.log(q[m]))))


def discrete_tr_step(m: DiscreteMeasure, epsilon: float) -> tuple[DiscreteMeasure, float]:
    """One exact trust-region step on a finite support.

    Returns the geometric-mean density ``∝ q^{lam/(1+lam)} rho^{1/(1+lam)}``
    and the maximizing multiplier.
    """
    support = m.q > 0
    if np.any(m.rho[support] <= 0):
        raise ValueError("rho vanishes where q > 0: the KL to the target is infinite")
    qs = m.q[support]
    lw = np.log(m.rho[support]) - np.log(qs)
    lam = solve_lambda(lw, epsilon, base=qs)
    c = 1.0 / (1.0 + lam)
    z = np.log(qs) + c * lw
    z -= z.max()
    nxt = np.zeros_like(m.q)
    e = np.exp(z)
    nxt[support] = e / e.sum()
    return DiscreteMeasure(nxt, m.rho), lam
