"""TERRA: transformer-enabled recursive residual learning for longitudinal
heterogeneous treatment effects.

Subpackages:
  autodiff   float64 tensors with reverse-mode automatic differentiation
  model      the two-stream causal transformer and its heads
  snmm       blipped outcomes, residualization, estimating-equation oracles
  training   Adamax, clipping, plateau decay, the joint training loop
  datagen    seeded simulation scenarios and the semi-synthetic DGP
  baselines  closed-form recursive R-learners
  metrics    MSE / Spearman evaluation against ground truth
  experiment config parsing and the reproducible experiment runner
  cli        command-line interface (``terra`` entry point)
"""

from .autodiff import Graph, Tensor, backward
from .baselines import RegressorKind, fit_linear, fit_recursive_rlearner
from .datagen import GroundTruth, ScenarioSpec, generate, scenario_spec
from .experiment import ExperimentConfig, parse_config, run_experiment, summarize
from .metrics import EvalReport, evaluate, spearman
from .model import ArchConfig, ModelOutputs, TerraModel
from .snmm import (Panel, Trajectory, blip_loss, estimating_equation,
                   proposition1_check, read_panel_csv, recursive_blip,
                   residualize, write_panel_csv)
from .training import TrainConfig, TrainResult, time_weights, train

__version__ = "0.1.0"

__all__ = [
    "Graph", "Tensor", "backward",
    "ArchConfig", "ModelOutputs", "TerraModel",
    "Panel", "Trajectory", "recursive_blip", "residualize", "blip_loss",
    "estimating_equation", "proposition1_check",
    "read_panel_csv", "write_panel_csv",
    "TrainConfig", "TrainResult", "train", "time_weights",
    "ScenarioSpec", "GroundTruth", "generate", "scenario_spec",
    "RegressorKind", "fit_linear", "fit_recursive_rlearner",
    "EvalReport", "evaluate", "spearman",
    "ExperimentConfig", "parse_config", "run_experiment", "summarize",
    "__version__",
]
