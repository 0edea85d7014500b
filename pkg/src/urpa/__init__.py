"""Uncertainty-quantified rollout policy adaptation for temporal grounding, at desk scale."""

from urpa.core import TimeInterval, GroundingSample, DatasetManifest, tiou, relax, clamp_interval
from urpa.adaptation import AdaptConfig, AdaptationError, PseudoLabel, adapt_target, build_pseudo_label
from urpa.bench import EvalReport, evaluate, run_ablation, run_experiment
from urpa.config import ConfigError, ExperimentConfig, default_config, load_config
from urpa.grpo import GrpoConfig, compute_advantages, train_source

__version__ = "0.1.0"

__all__ = [
    "TimeInterval",
    "GroundingSample",
    "DatasetManifest",
    "tiou",
    "relax",
    "clamp_interval",
    "AdaptConfig",
    "AdaptationError",
    "PseudoLabel",
    "adapt_target",
    "build_pseudo_label",
    "EvalReport",
    "evaluate",
    "run_ablation",
    "run_experiment",
    "ConfigError",
    "ExperimentConfig",
    "default_config",
    "load_config",
    "GrpoConfig",
    "compute_advantages",
    "train_source",
]
