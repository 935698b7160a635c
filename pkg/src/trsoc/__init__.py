"""Trust-region solvers for stochastic optimal control and diffusion sampling."""

from ._kernels import BACKEND
from .benchmarks import GmmTarget, make_problem
from .driver import RunConfig, run
from .losses import LossBatch, ce_loss, lean_adjoint_solve, lv_loss, moment_loss, socm_loss
from .measures import girsanov_log_rnd, shifted_work, work
from .nn import Adam, ControlNet, load_checkpoint, save_checkpoint
from .sde import SocProblem, TimeGrid, TrajectoryBatch, simulate
from .trustregion import AnnealingState, discrete_tr_step, solve_lambda

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "GmmTarget", "make_problem", "RunConfig", "run", "LossBatch", "ce_loss",
    "lean_adjoint_solve", "lv_loss", "moment_loss", "socm_loss", "girsanov_log_rnd",
    "shifted_work", "work", "Adam", "ControlNet", "load_checkpoint", "save_checkpoint",
    "SocProblem", "TimeGrid", "TrajectoryBatch", "simulate", "AnnealingState",
    "discrete_tr_step", "solve_lambda",
]
