"""Stabilizing neural controllers for unknown discrete-time systems:
soft actor-critic training with online least-squares identification of
the local linear dynamics and an LQR gain penalty in the actor loss,
plus deterministic evaluation and sampling-based Lyapunov certification.
"""

from .agent import ReplayBuffer, SacNets, TrainConfig, Transition, finalize_policy, train
from .envs import EnvSpec, StepResult, make_env
from .evaluate import RoaReport, Trajectory, compare_costs, roa_estimate, rollout
from .linalg import DareSolution, is_schur_stable, solve_dare, solve_discrete_lyapunov
from .nets import GaussianPolicy, Mlp, load_policy, save_policy
from .sysid import GainEstimate, LinearModel, SysIdBuffer

__all__ = [
    "DareSolution",
    "EnvSpec",
    "GainEstimate",
    "GaussianPolicy",
    "LinearModel",
    "Mlp",
    "ReplayBuffer",
    "RoaReport",
    "SacNets",
    "StepResult",
    "SysIdBuffer",
    "TrainConfig",
    "Trajectory",
    "Transition",
    "compare_costs",
    "finalize_policy",
    "is_schur_stable",
    "load_policy",
    "make_env",
    "roa_estimate",
    "rollout",
    "save_policy",
    "solve_dare",
    "solve_discrete_lyapunov",
    "train",
]

__version__ = "0.1.0"
