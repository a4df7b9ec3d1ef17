"""Length generalization experiments for arithmetic transformers."""

from ._lengen import (
    VOCAB,
    CheckpointError,
    ConfigError,
    ExperimentConfig,
    Model,
    TaskSpec,
    __version__,
    add,
    bisect_priming_rate,
    carry_profile,
    elementwise_add,
    evaluate,
    failure_report,
    generate,
    mod,
    mul,
    read_metrics,
    report,
    threshold_length,
    train,
)

__all__ = [
    "VOCAB",
    "CheckpointError",
    "ConfigError",
    "ExperimentConfig",
    "Model",
    "TaskSpec",
    "add",
    "bisect_priming_rate",
    "carry_profile",
    "elementwise_add",
    "evaluate",
    "failure_report",
    "generate",
    "mod",
    "mul",
    "read_metrics",
    "report",
    "threshold_length",
    "train",
]
