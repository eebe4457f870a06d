"""Corrective labels for behaviour cloning from Lipschitz-constrained dynamics models."""

__version__ = "0.1.0"

from .exceptions import CCILError, ConfigurationError, EnvironmentMisconfigured, InputError, TrainingError
from .nn import Mlp, SpectralConstraint, TrainConfig, backward, forward, jacobian, spectral_norm, spectral_project
from .dynamics import ResidualDynamics, Transition, TrajectoryDataset, lipschitz_distribution, train_dynamics
from .labeler import CorrectiveLabel, FilterConfig, LabelFilter, filter_labels, gen_labels, label_error_cdf
from .policy import AugmentedDataset, BCPolicy, action_loss, train_policy
from .envs import EnvSpec, collect, evaluate, make_env, rollout, scripted_expert
from .experiments import AblationConfig, AblationReport, emit_report, run_ablation, run_cell, z_test

__all__ = [
    "__version__",
    "CCILError", "ConfigurationError", "EnvironmentMisconfigured", "InputError", "TrainingError",
    "Mlp", "SpectralConstraint", "TrainConfig", "backward", "forward", "jacobian", "spectral_norm",
    "spectral_project",
    "ResidualDynamics", "Transition", "TrajectoryDataset", "lipschitz_distribution", "train_dynamics",
    "CorrectiveLabel", "FilterConfig", "LabelFilter", "filter_labels", "gen_labels", "label_error_cdf",
    "AugmentedDataset", "BCPolicy", "action_loss", "train_policy",
    "EnvSpec", "collect", "evaluate", "make_env", "rollout", "scripted_expert",
    "AblationConfig", "AblationReport", "emit_report", "run_ablation", "run_cell", "z_test",
]
