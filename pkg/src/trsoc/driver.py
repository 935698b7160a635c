"""Outer trust-region loop with a wholesale-refreshed replay buffer."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .benchmarks import PROBLEM_IDS, make_problem
from .losses import LOSS_IDS, LossBatch, evaluate, lean_adjoint_solve
from .measures import shifted_work
from .metrics import MetricsWriter, evaluate_control
from .nn import PRESETS, Adam, ControlNet, NonFiniteGradient, save_checkpoint
from .sde import INTEGRATORS, SimulationError, TimeGrid, simulate
from .trustregion import AnnealingState, RunningAverage, kl_and_ess_diagnostics, solve_lambda

log = logging.getLogger(__name__)

# stream tags mixed into the seed so every random draw has its own stream
_SIM, _MINIBATCH, _EVAL, _TIMES = 1, 2, 3, 4


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class RunConfig:
    problem: str = "gmm2d"
    loss: str = "tr-lv"
    dim: Optional[int] = None
    epsilon: float = 0.1
    delta: float = 1e-3
    trust_region: bool = True
    buffer_size: int = 2000
    inner_steps: int = 200
    batch: int = 128
    steps: int = 50
    horizon: float = 1.0
    integrator: str = "auto"
    net: str = "desk"
    lr: float = 5e-4
    clip: float = 1.0
    socm_times: int = 8
    seed: int = 0
    problem_seed: int = 0
    max_outer: int = 60
    eval_every: int = 1
    eval_samples: int = 2000
    eval_window: int = 5
    checkpoint_every: int = 0
    wall_time: bool = False

    def validate(self):
        errors = []
        if self.problem not in PROBLEM_IDS:
            errors.append(f"problem: unknown id {self.problem!r}; valid: {', '.join(PROBLEM_IDS)}")
        if self.loss not in LOSS_IDS:
            errors.append(f"loss: unknown id {self.loss!r}; valid: {', '.join(LOSS_IDS)}")
        if self.net not in PRESETS:
            errors.append(f"net: unknown preset {self.net!r}; valid: {', '.join(PRESETS)}")
        if self.integrator not in INTEGRATORS + ("auto",):
            errors.append(f"integrator: must be one of auto, {', '.join(INTEGRATORS)}")
        for name in ("epsilon", "horizon", "lr", "clip"):
            if not getattr(self, name) > 0:
                errors.append(f"{name}: must be > 0")
        if self.delta < 0:
            errors.append("delta: must be >= 0")
        for name in ("buffer_size", "inner_steps", "batch", "steps", "socm_times", "max_outer",
                     "eval_every", "eval_samples", "eval_window"):
            if getattr(self, name) < 1:
                errors.append(f"{name}: must be >= 1")
        if self.buffer_size < 2 or self.batch < 2:
            errors.append("buffer_size/batch: need at least two trajectories")
        if self.eval_samples < 2:
            errors.append("eval_samples: must be >= 2")
        if self.checkpoint_every < 0:
            errors.append("checkpoint_every: must be >= 0")
        if self.dim is not None and self.dim < 1:
            errors.append("dim: must be >= 1")
        if errors:
            raise ValueError("; ".join(errors))
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class OuterStep:
    lam: float
    state: AnnealingState
    done: bool


def outer_step(logw, state: AnnealingState, trust_region: bool = True) -> OuterStep:
    """Multiplier, annealing update and the stopping rule for one iteration."""
    lam = solve_lambda(logw, state.epsilon) if trust_region else 0.0
    new = state.update(lam)
    return OuterStep(lam, new, trust_region and lam <= state.delta)


@dataclass
class RunReport:
    config: RunConfig
    net: ControlNet
    lambdas: list = field(default_factory=list)
    betas: list = field(default_factory=list)
    termination: str = ""
    iterations: int = 0
    target_evals: int = 0
    final: dict = field(default_factory=dict)
    smoothed: dict = field(default_factory=dict)
    metrics: Optional[MetricsWriter] = None
    log_z_param: Optional[float] = None

    def summary(self) -> dict:
        return dict(
            config=self.config.to_dict(),
            termination=self.termination,
            iterations=self.iterations,
            target_evals=self.target_evals,
            lambdas=self.lambdas,
            betas=self.betas,
            final=self.final,
            smoothed=self.smoothed,
            log_z_param=self.log_z_param,
        )


def _integrator(cfg, problem):
    if cfg.integrator != "auto":
        return cfg.integrator
    return "exp_ou" if problem.ou_rate is not None else "euler"


def run(cfg: RunConfig, out_dir=None, problem=None) -> RunReport:
    """Train a control with the trust-region scheme described by ``cfg``.

    When ``out_dir`` is given, ``metrics.csv`` and checkpoints are written
    there as the run progresses.
    """
    cfg.validate()
    problem = problem or make_problem(cfg.problem, cfg.dim, T=cfg.horizon, problem_seed=cfg.problem_seed)
    grid = TimeGrid.uniform(cfg.horizon, cfg.steps)
    integ = _integrator(cfg, problem)
    out = None if out_dir is None else Path(out_dir)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    net = ControlNet(problem.dim, eta=problem.meta.get("eta", 1.0), T=cfg.horizon, seed=cfg.seed, **PRESETS[cfg.net])
    params = dict(net.params)
    log_z = None
    if cfg.loss == "tr-moment":
        log_z = ad.Tensor(np.zeros(1), requires_grad=True, name="log_z")
        params["log_z"] = log_z
    opt = Adam(params, lr=cfg.lr, clip=cfg.clip)

    writer = MetricsWriter(None if out is None else out / "metrics.csv")
    report = RunReport(cfg, net, metrics=writer)
    state = AnnealingState(cfg.epsilon, cfg.delta)
    averages = {k: RunningAverage(cfg.eval_window) for k in ("ctrl_l2", "dlogz", "tvd")}
    per_path_evals = 1 + (0 if problem.zero_running_cost else cfg.steps)
    t0 = time.perf_counter()
    lr_halved = False

    def checkpoint(tag="last"):
        if out is not None:
            save_checkpoint(out / f"{tag}.ckpt", net, extra=dict(iteration=report.iterations, problem=problem.name))

    def evaluation(it):
        res = evaluate_control(problem, net.copy(), grid, cfg.eval_samples, (cfg.seed, _EVAL, it), integ)
        report.target_evals += cfg.eval_samples * per_path_evals
        for k, avg in averages.items():
            if k in res:
                avg.push(res[k])
        return res

    for it in range(cfg.max_outer):
        frozen = net.copy()
        try:
            batch = simulate(problem, frozen, grid, cfg.buffer_size, (cfg.seed, _SIM, it), integ)
        except SimulationError as exc:
            report.termination = f"simulation failed: {exc}"
            break
        report.target_evals += cfg.buffer_size * per_path_evals
        logw = -shifted_work(batch, problem)
        step = outer_step(logw, state, cfg.trust_region)
        lam, state = step.lam, step.state
        kl, ess = kl_and_ess_diagnostics(logw, lam)
        report.lambdas.append(lam)
        report.betas.append(state.beta)
        report.iterations = it + 1
        row = dict(outer_iter=it, inner_step=0, target_evals=report.target_evals, beta=state.beta, ess=ess, kl_est=kl)
        row["lambda"] = lam
        if step.done:
            row.update(_eval_cols(evaluation(it)))
            row["target_evals"] = report.target_evals
            _stamp(row, cfg, t0)
            writer.write(row)
            report.termination = "converged"
            break

        adjoint = sigma = None
        if cfg.loss == "tr-socm":
            beta = state.beta if cfg.trust_region else 1.0
            adjoint = lean_adjoint_solve(batch, problem, beta)
            sigma = np.broadcast_to(np.asarray(problem.sigma_at(grid.times), dtype=np.float64), grid.times.shape)
        lb = LossBatch.from_trajectories(batch, logw, lam, state.beta, adjoint, sigma)

        snapshot = net.get_flat()
        lz_snapshot = None if log_z is None else log_z.data.copy()
        try:
            losses = _inner_loop(cfg, lb, net, opt, log_z, it)
        except (TrainingDiverged, NonFiniteGradient) as exc:
            if lr_halved:
                net.set_flat(snapshot)
                report.termination = f"diverged: {exc}"
                log.warning("training diverged twice; aborting with the last good control")
                break
            log.warning("training diverged (%s); halving the learning rate and retrying", exc)
            lr_halved = True
            net.set_flat(snapshot)
            if log_z is not None:
                log_z.data = lz_snapshot
            opt = Adam(params, lr=opt.lr * 0.5, clip=cfg.clip)
            try:
                losses = _inner_loop(cfg, lb, net, opt, log_z, it)
            except (TrainingDiverged, NonFiniteGradient) as exc2:
                net.set_flat(snapshot)
                report.termination = f"diverged: {exc2}"
                break

        row["inner_step"] = cfg.inner_steps
        row["loss"] = float(np.mean(losses[-min(len(losses), 10):]))
        if (it + 1) % cfg.eval_every == 0:
            row.update(_eval_cols(evaluation(it)))
        row["target_evals"] = report.target_evals
        _stamp(row, cfg, t0)
        writer.write(row)
        log.info("iter %d: lambda=%.4g beta=%.4f ess=%.3f loss=%.4g %s", it, lam, state.beta, ess, row["loss"],
                 {k: round(float(row[k]), 4) for k in ("ctrl_l2", "dlogz", "tvd") if k in row})
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint()
    else:
        report.termination = "max_outer reached" if cfg.trust_region else "completed max_outer iterations"

    final = evaluate_control(problem, net.copy(), grid, cfg.eval_samples, (cfg.seed, _EVAL, 10**6), integ)
    report.final = {k: float(v) for k, v in final.items()}
    report.smoothed = {k: avg.value for k, avg in averages.items() if avg._values}
    report.log_z_param = None if log_z is None else float(log_z.data[0])
    checkpoint()
    return report


def _eval_cols(res):
    return {k: v for k, v in res.items() if k in ("ctrl_l2", "ctrl_l2_se", "dlogz", "tvd")}


def _stamp(row, cfg, t0):
    # wall time is opt-in so that metrics.csv is byte-reproducible by default
    if cfg.wall_time:
        row["wall_time"] = time.perf_counter() - t0


def _inner_loop(cfg, lb: LossBatch, net, opt, log_z, it):
    rng = np.random.default_rng([cfg.seed, _MINIBATCH, it])
    trng = np.random.default_rng([cfg.seed, _TIMES, it])
    losses = []
    for _ in range(cfg.inner_steps):
        idx = rng.integers(0, lb.K, size=cfg.batch)
        mb = lb.subset(idx)
        opt.zero_grad()
        loss = evaluate(cfg.loss, mb, net, log_z=log_z, M=cfg.socm_times, rng=trng)
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingDiverged(f"non-finite loss at outer iteration {it}")
        loss.backward()
        opt.step()
        losses.append(val)
    return losses
