from .config import ConfigError, ExperimentConfig, ShiftEntry
from .experiments import adapt_eval, make_run_dir, run_experiment1, run_experiment2, train_single
from .report import emit_report

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ShiftEntry",
    "adapt_eval",
    "emit_report",
    "make_run_dir",
    "run_experiment1",
    "run_experiment2",
    "train_single",
]
