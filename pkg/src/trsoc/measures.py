"""Work functionals and log Radon-Nikodym derivatives along simulated paths.

Everything stays in log space; exponentials only appear inside
max-shifted log-sum-exp reductions.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .sde import SocProblem, TrajectoryBatch


class EvaluationError(FloatingPointError):
    def __init__(self, index: int, what: str):
        self.index = index
        super().__init__(f"non-finite {what} for trajectory {index}")


def _check_finite(values, what):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise EvaluationError(int(bad[0]), what)
    return values


def control_values(control, batch: TrajectoryBatch) -> np.ndarray:
    """Evaluate ``control`` at ``(X_j, s_j)`` for ``j < J``; arrays pass through.

    Returns a ``(K, J, d)`` array. ``None`` stands for the zero control.
    """
    K, J, d = batch.u.shape
    if control is None:
        return np.zeros((K, J, d))
    if isinstance(control, np.ndarray):
        if control.shape != (K, J, d):
            raise ValueError(f"control array shape {control.shape} does not match batch {(K, J, d)}")
        return control
    times = batch.grid.times[:-1]
    x = batch.X[:, :-1].reshape(K * J, d)
    t = np.repeat(times[None, :], K, axis=0).reshape(K * J)
    out = np.asarray(control(x, t), dtype=np.float64)
    if out.shape != (K * J, d):
        raise ValueError(f"control returned shape {out.shape}, expected {(K * J, d)}")
    return out.reshape(K, J, d)


def work(batch: TrajectoryBatch, problem: SocProblem) -> np.ndarray:
    """``sum_j f(X_j, s_j) dt_j + g(X_J)`` per trajectory."""
    K, J1, d = batch.X.shape
    g = _check_finite(np.asarray(problem.terminal_cost(batch.X[:, -1]), dtype=np.float64), "terminal cost")
    if problem.zero_running_cost:
        return g.copy()
    times = batch.grid.times[:-1]
    dt = batch.grid.dt
    x = batch.X[:, :-1].reshape(K * (J1 - 1), d)
    t = np.repeat(times[None, :], K, axis=0).reshape(-1)
    f = np.asarray(problem.running_cost(x, t), dtype=np.float64).reshape(K, J1 - 1)
    run = f @ dt
    _check_finite(run, "running cost")
    return run + g


def girsanov_log_rnd(u, v, batch: TrajectoryBatch, w=None) -> np.ndarray:
    """``log dP^u/dP^v`` evaluated on paths simulated under ``w``.

    ``w`` defaults to the control recorded in the batch. Each control may be a
    callable, a precomputed ``(K, J, d)`` array or ``None`` (zero).
    """
    U = control_values(u, batch)
    V = control_values(v, batch)
    Wc = batch.u if w is None else control_values(w, batch)
    diff = U - V
    _, stoch = _kernels.path_girsanov(diff, batch.dW, batch.qv_dt)
    # (u - v).w - (|u|^2 - |v|^2)/2, times dtau
    cross = np.einsum("kjd,kjd->kj", diff, Wc) - 0.5 * (
        np.einsum("kjd,kjd->kj", U, U) - np.einsum("kjd,kjd->kj", V, V)
    )
    return stoch + cross @ batch.qv_dt


def shifted_work(batch: TrajectoryBatch, problem: SocProblem, u_i=None) -> np.ndarray:
    """Work plus the Girsanov terms of the sampling control.

    ``W_i = sum 0.5|u_i|^2 dt + sum u_i.dW + W``; ``-W_i`` is the log
    importance weight of the optimal path measure against ``P^{u_i}``.
    """
    U = batch.u if u_i is None else control_values(u_i, batch)
    quad, stoch = _kernels.path_girsanov(U, batch.dW, batch.qv_dt)
    return quad + stoch + work(batch, problem)


def log_mean_exp(a, weights=None) -> float:
    """``log mean exp(a)``, or ``log sum weights*exp(a)`` when weights are given."""
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ValueError("empty input")
    m = a.max()
    if weights is None:
        return float(m + np.log(np.mean(np.exp(a - m))))
    return float(m + np.log(np.sum(weights * np.exp(a - m))))


def self_normalize(logw, temper: float = 1.0) -> np.ndarray:
    """``softmax(temper * logw)``; invariant to constant shifts of ``logw``."""
    logw = np.asarray(logw, dtype=np.float64)
    if logw.size == 0:
        raise ValueError("cannot normalize an empty batch")
    if temper < 0:
        raise ValueError("temper must be nonnegative")
    z = temper * logw
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()
