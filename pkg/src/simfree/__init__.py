"""Simulation-free gradient estimators for controlled SDEs.
"""

__version__ = "0.1.0"

from .grad import GradEstimate, objective_estimate, offpolicy_objective, simfree_gradient, vanilla_gradient
from .policy import MlpPolicy, PisPolicy, ZeroPolicy, build_policy, init_policy, load_checkpoint, save_checkpoint
from .problems import (
    FunnelTarget, LinearOuSpec, LqrSpec, SocProblem, follmer_problem, finetune_problem, funnel_problem,
    gaussian_follmer_problem, linear_ou_problem, lqr_problem, solve_riccati,
)
from .rng import CounterRng
from .sampling import ess, finetune_weights, follmer_sample, log_z_estimate, reweighted_expectation
from .sde_core import make_randomized_grid, sample_wiener_increments, simulate_controlled, uniform_grid
from .train import TrainConfig, train_loop

__all__ = [
    "CounterRng", "FunnelTarget", "GradEstimate", "LinearOuSpec", "LqrSpec", "MlpPolicy", "PisPolicy",
    "SocProblem", "TrainConfig", "ZeroPolicy", "build_policy", "ess", "finetune_problem", "finetune_weights",
    "follmer_problem", "follmer_sample", "funnel_problem", "gaussian_follmer_problem", "init_policy",
    "linear_ou_problem", "load_checkpoint", "log_z_estimate", "lqr_problem", "make_randomized_grid",
    "objective_estimate", "offpolicy_objective", "reweighted_expectation", "sample_wiener_increments",
    "save_checkpoint", "simfree_gradient", "simulate_controlled", "solve_riccati", "train_loop",
    "uniform_grid", "vanilla_gradient",
]
