"""Trust-region losses on buffer batches, and the lean adjoint.

All losses share the per-path bracket

    B = sum_j 0.5*|D_j|^2 dtau_j + sum_j D_j . dW_j + logw / (1 + lam)

with ``D_j = u_i(X_j, s_j) - u_theta(X_j, s_j)`` on paths sampled under the
frozen iterate ``u_i``. ``B`` is, up to a constant, the log-RND of the next
iterate against ``P^{u_theta}``. Tempered weights only depend on frozen
quantities and are held constant in the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from . import autodiff as ad
from .autodiff import Tensor
from .measures import EvaluationError, log_mean_exp, self_normalize
from .sde import SocProblem, TrajectoryBatch

LOSS_IDS = ("tr-lv", "tr-ce", "tr-moment", "tr-socm")


class ContractError(ValueError):
    pass


def _temper(lam: float) -> float:
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    return 0.0 if np.isinf(lam) else 1.0 / (1.0 + lam)


@dataclass(frozen=True)
class LossBatch:
    """A minibatch drawn from the replay buffer.

    ``X`` is ``(K, J+1, d)``; ``dW`` and ``u_prev`` are ``(K, J, d)``;
    ``qv_dt`` is ``(J,)`` and ``times`` is ``(J+1,)``. ``adjoint`` (optional)
    is ``(K, J+1, d)`` and ``sigma`` holds ``sigma(s_j)`` for ``j <= J``.
    """

    X: np.ndarray
    dW: np.ndarray
    u_prev: np.ndarray
    qv_dt: np.ndarray
    times: np.ndarray
    logw: np.ndarray
    lam: float
    beta: float = 0.0
    adjoint: Optional[np.ndarray] = None
    sigma: Optional[np.ndarray] = None

    def __post_init__(self):
        K, J1, d = self.X.shape
        if self.dW.shape != (K, J1 - 1, d) or self.u_prev.shape != (K, J1 - 1, d):
            raise ContractError("dW / u_prev must be (K, J, d) matching X")
        if self.qv_dt.shape != (J1 - 1,) or self.times.shape != (J1,):
            raise ContractError("qv_dt / times do not match the number of steps")
        if self.logw.shape != (K,):
            raise ContractError("logw must have one entry per trajectory")
        if not np.all(np.isfinite(self.logw)):
            raise ContractError("logw must be finite")
        if self.adjoint is not None and self.adjoint.shape != self.X.shape:
            raise ContractError("adjoint must have the shape of X")
        _temper(self.lam)

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def J(self) -> int:
        return self.dW.shape[1]

    @property
    def dim(self) -> int:
        return self.X.shape[2]

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    @classmethod
    def from_trajectories(cls, batch: TrajectoryBatch, logw, lam, beta=0.0, adjoint=None, sigma=None):
        return cls(batch.X, batch.dW, batch.u, batch.qv_dt, batch.grid.times, np.asarray(logw, dtype=np.float64),
                   float(lam), float(beta), adjoint, sigma)

    def subset(self, idx) -> "LossBatch":
        idx = np.asarray(idx)
        adj = None if self.adjoint is None else self.adjoint[idx]
        return LossBatch(self.X[idx], self.dW[idx], self.u_prev[idx], self.qv_dt, self.times,
                         self.logw[idx], self.lam, self.beta, adj, self.sigma)

    def tempered_weights(self) -> np.ndarray:
        return self_normalize(self.logw, _temper(self.lam))


def _net_on_path(net, batch: LossBatch) -> Tensor:
    K, J, d = batch.K, batch.J, batch.dim
    x = batch.X[:, :-1].reshape(K * J, d)
    t = np.broadcast_to(batch.times[:-1], (K, J)).reshape(K * J)
    return ad.reshape(net.forward(x, t), (K, J, d))


def bracket(batch: LossBatch, net) -> Tensor:
    """Per-trajectory bracket ``B`` (shape ``(K,)``)."""
    diff = ad.sub(batch.u_prev, _net_on_path(net, batch))
    quad = ad.sum(ad.mul(ad.sqnorm_rows(diff), 0.5 * batch.qv_dt), axis=1)
    stoch = ad.sum(ad.dot_rows(diff, batch.dW), axis=1)
    return ad.add(ad.add(quad, stoch), _temper(batch.lam) * batch.logw)


def _need_two(batch):
    if batch.K < 2:
        raise ContractError("variance-type losses need at least two trajectories")


def lv_loss(batch: LossBatch, net, reference: str = "u_i") -> Tensor:
    """Log-variance loss; ``reference="u_next"`` reweights both moments."""
    _need_two(batch)
    B = bracket(batch, net)
    if reference == "u_i":
        return ad.var_batch(B)
    if reference != "u_next":
        raise ContractError(f"unknown reference {reference!r}")
    w = batch.tempered_weights()
    m = ad.sum(ad.mul(B, w))
    c = ad.sub(B, m)
    return ad.sum(ad.mul(ad.square(c), w))


def ce_loss(batch: LossBatch, net) -> Tensor:
    """Weighted mean of ``log dP^{u_{i+1}}/dP^{u_theta}`` under the tempered weights."""
    _need_two(batch)
    c = _temper(batch.lam)
    w = batch.tempered_weights()
    B = bracket(batch, net)
    return ad.sub(ad.sum(ad.mul(B, w)), log_mean_exp(c * batch.logw))


def moment_loss(batch: LossBatch, net, log_z: Tensor) -> Tensor:
    _need_two(batch)
    B = bracket(batch, net)
    return ad.mean(ad.square(ad.sub(B, ad.reshape(log_z, (1,)))))


def sample_time_indices(dt: np.ndarray, K: int, M: int, rng: np.random.Generator) -> np.ndarray:
    """``(K, M)`` grid indices drawn with probability proportional to ``dt``."""
    p = dt / dt.sum()
    return rng.choice(dt.size, size=(K, M), p=p)


def socm_loss(batch: LossBatch, net, M: int = 8, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Weighted regression of ``u_theta`` onto ``-sigma * a`` along the paths.

    With ``M >= J`` every grid index is used (time-integral weights ``dt``);
    otherwise ``M`` indices per path are drawn with probability ``dt / T``,
    which is an unbiased estimate of the same quantity.
    """
    if batch.adjoint is None or batch.sigma is None:
        raise ContractError("socm_loss needs adjoint states and sigma values")
    K, J, d = batch.K, batch.J, batch.dim
    dt = batch.dt
    T = float(batch.times[-1] - batch.times[0])
    wk = batch.tempered_weights()
    if M >= J:
        rows = np.repeat(np.arange(K), J)
        cols = np.tile(np.arange(J), K)
        coef = (wk[:, None] * dt[None, :]).ravel()
    else:
        if rng is None:
            raise ContractError("time subsampling needs an rng")
        idx = sample_time_indices(dt, K, M, rng)
        rows = np.repeat(np.arange(K), M)
        cols = idx.ravel()
        coef = np.repeat(wk * (T / M), M)
    x = batch.X[rows, cols]
    t = batch.times[cols]
    sig = np.asarray(batch.sigma, dtype=np.float64)[cols][:, None]
    target = -sig * batch.adjoint[rows, cols]
    resid = ad.sub(target, net.forward(x, t))
    return ad.sum(ad.mul(ad.sqnorm_rows(resid), 0.5 * coef))


# -- lean adjoint ----------------------------------------------------------


def _grad_g(problem, xT):
    gg = np.asarray(problem.terminal_cost_grad(xT), dtype=np.float64)
    bad = np.flatnonzero(~np.all(np.isfinite(gg), axis=1))
    if bad.size:
        raise EvaluationError(int(bad[0]), "terminal cost gradient")
    return gg


def lean_adjoint_solve(batch: TrajectoryBatch, problem: SocProblem, beta: float, method: str = "auto") -> np.ndarray:
    """Backward-Euler lean adjoint ``(K, J+1, d)`` along stored states.

    ``method`` is ``"auto"`` (kernel when the drift is diagonal-linear),
    ``"generic"`` (vector-Jacobian products) or ``"closed_form"``.
    """
    K, J1, d = batch.X.shape
    if beta == 0.0:
        return np.zeros((K, J1, d))
    times = batch.grid.times
    dt = batch.grid.dt
    gg = _grad_g(problem, batch.X[:, -1])
    if method == "closed_form":
        return closed_form_adjoint(batch, problem, beta, gg)
    gradf = None
    if not problem.zero_running_cost:
        gradf = np.stack([problem.running_cost_grad(batch.X[:, j], times[j]) for j in range(J1)], axis=1)
    if method == "auto" and problem.linear_drift_diag is not None:
        bdiag = np.stack([np.broadcast_to(np.asarray(problem.linear_drift_diag(s), dtype=np.float64), (d,))
                          for s in times])
        return _kernels.adjoint_linear_diag(gg, bdiag, gradf, dt, beta)
    if method not in ("auto", "generic"):
        raise ValueError(f"unknown adjoint method {method!r}")
    a = np.empty((K, J1, d))
    cur = beta * gg
    a[:, -1] = cur
    for j in range(J1 - 2, -1, -1):
        step = problem.drift_vjp(batch.X[:, j + 1], times[j + 1], cur)
        if gradf is not None:
            step = step + beta * gradf[:, j + 1]
        cur = cur + dt[j] * step
        a[:, j] = cur
    return a


def closed_form_adjoint(batch: TrajectoryBatch, problem: SocProblem, beta: float, grad_g=None) -> np.ndarray:
    """``a(s) = beta * gamma(s) * grad g(X_T)`` with ``gamma(s) = exp(int_s^T b1)``.

    Valid for ``b(x, t) = b1(t) x`` and zero running cost. The problem must
    provide ``meta["drift_integral"](s) = int_s^T b1(t) dt``.
    """
    integral = problem.meta.get("drift_integral")
    if integral is None or not problem.zero_running_cost:
        raise ValueError(f"problem {problem.name!r} has no closed-form adjoint")
    gg = _grad_g(problem, batch.X[:, -1]) if grad_g is None else grad_g
    gamma = np.exp(np.array([integral(s) for s in batch.grid.times]))
    return beta * gamma[None, :, None] * gg[:, None, :]


def evaluate(loss_id: str, batch: LossBatch, net, log_z: Optional[Tensor] = None, M: int = 8, rng=None) -> Tensor:
    if loss_id == "tr-lv":
        return lv_loss(batch, net)
    if loss_id == "tr-ce":
        return ce_loss(batch, net)
    if loss_id == "tr-moment":
        if log_z is None:
            raise ContractError("tr-moment needs a log_z parameter")
        return moment_loss(batch, net, log_z)
    if loss_id == "tr-socm":
        return socm_loss(batch, net, M=M, rng=rng)
    raise ContractError(f"unknown loss {loss_id!r}; valid: {', '.join(LOSS_IDS)}")
