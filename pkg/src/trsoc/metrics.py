"""Evaluation metrics and the metrics CSV writer."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .benchmarks import GmmTarget
from .measures import control_values, girsanov_log_rnd, log_mean_exp, shifted_work
from .sde import SocProblem, TimeGrid, simulate

COLUMNS = (
    "outer_iter", "inner_step", "wall_time", "target_evals", "lambda", "beta",
    "ess", "kl_est", "loss", "ctrl_l2", "ctrl_l2_se", "dlogz", "tvd",
)


def _mean_se(values):
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else float("nan")
    return float(v.mean()), se


def control_l2_error(u_ref, u, problem: SocProblem, grid: TimeGrid, K: int, seed, integrator="euler"):
    """``E[0.5 * int |u_ref - u|^2 ds]`` on paths simulated under ``u_ref``.

    Returns ``(estimate, standard_error)``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    batch = simulate(problem, u_ref, grid, K, seed, integrator)
    diff = batch.u - control_values(u, batch)
    per_path = 0.5 * np.einsum("kjd,kjd->kj", diff, diff) @ grid.dt
    return _mean_se(per_path)


def forward_kl_estimate(u_ref, u, problem: SocProblem, grid: TimeGrid, K: int, seed, integrator="euler"):
    """``E[log dP^{u_ref}/dP^u]`` on paths under ``u_ref``, with its standard error."""
    batch = simulate(problem, u_ref, grid, K, seed, integrator)
    return _mean_se(girsanov_log_rnd(batch.u, u, batch))


def log_z_estimate(batch, problem: SocProblem, u=None, with_se=False):
    """``log mean exp(-W_u)`` on a batch simulated under ``u``.

    ``u`` defaults to the control recorded in the batch. The standard error
    uses the delta method on the normalized weights.
    """
    logw = -shifted_work(batch, problem, u)
    est = log_mean_exp(logw)
    if not with_se:
        return est
    w = np.exp(logw - est)
    se = float(w.std(ddof=1) / np.sqrt(w.size)) if w.size > 1 else float("nan")
    return est, se


def effective_sample_size(logw) -> float:
    """Normalized ESS ``1 / (K * sum w^2)`` in ``(0, 1]``."""
    lw = np.asarray(logw, dtype=np.float64).ravel()
    w = np.exp(lw - lw.max())
    w /= w.sum()
    return float(1.0 / (lw.size * np.dot(w, w)))


def mode_weights(samples, target: GmmTarget) -> np.ndarray:
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("mode_tvd needs at least one sample")
    if not np.all(np.isfinite(x)):
        raise ValueError("samples must be finite")
    labels = np.argmax(target.component_logpdf(x), axis=1)
    return np.bincount(labels, minlength=target.n_components) / x.shape[0]


def mode_tvd(samples, target: GmmTarget) -> float:
    """``sum_k |pi_k - pi_hat_k|`` with samples assigned by posterior argmax."""
    return float(np.abs(target.weights - mode_weights(samples, target)).sum())


def evaluate_control(problem: SocProblem, control, grid: TimeGrid, K: int, seed, integrator="euler") -> dict:
    """Every metric the problem supports, keyed by CSV column name."""
    if K < 2:
        raise ValueError("evaluation needs K >= 2")
    out = {}
    batch = simulate(problem, control, grid, K, (*np.atleast_1d(seed).tolist(), 0), integrator)
    lz = log_z_estimate(batch, problem)
    out["log_z"] = lz
    if "log_z_ref" in problem.meta:
        out["dlogz"] = abs(lz - problem.meta["log_z_ref"])
    if "gmm" in problem.meta:
        out["tvd"] = mode_tvd(batch.X[:, -1], problem.meta["gmm"])
    if "u_star" in problem.meta:
        est, se = control_l2_error(problem.meta["u_star"], control, problem, grid, K,
                                   (*np.atleast_1d(seed).tolist(), 1), integrator)
        out["ctrl_l2"], out["ctrl_l2_se"] = est, se
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if not np.isfinite(v):
        return "" if np.isnan(v) else repr(v)
    return repr(v)


def format_row(row: dict) -> list:
    unknown = set(row) - set(COLUMNS)
    if unknown:
        raise KeyError(f"unknown metrics columns: {sorted(unknown)}")
    return [_fmt(row.get(c)) for c in COLUMNS]


class MetricsWriter:
    """Append-only CSV writer; absent metrics are written as empty cells."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.rows = []
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(COLUMNS)

    def write(self, row: dict):
        cells = format_row(row)
        self.rows.append(dict(row))
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(cells)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.rows:
            w.writerow(format_row(r))
        return buf.getvalue()
