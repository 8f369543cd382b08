"""Posterior inference over simulator parameters with constrained SVGD and multiple shooting."""

from .diffsim import LinkParams, ParamSpec, PendulumModel, State, Trajectory, TrajectorySet
from .likelihoods import LikelihoodConfig, ShootingProblem
from .metrics import MetricReport, evaluate_posterior, knn_kl, mmd
from .svgd import KernelConfig, MdmmConfig, Posterior, csvgd_estimate, svgd_estimate

__all__ = [
    "KernelConfig", "LikelihoodConfig", "LinkParams", "MdmmConfig", "MetricReport", "ParamSpec",
    "PendulumModel", "Posterior", "ShootingProblem", "State", "Trajectory", "TrajectorySet",
    "csvgd_estimate", "evaluate_posterior", "knn_kl", "mmd", "svgd_estimate",
]
