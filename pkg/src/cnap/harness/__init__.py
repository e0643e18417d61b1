"""Experiment configs, seed sweeps, evaluation, CSV/SVG output and the CLI."""

from .config import ConfigError, ExperimentConfig, expand_grid, from_dict, load_config
from .plot import emit_plot
from .runner import ResultRow, RunFailure, aggregate, evaluate, read_rows, run_experiment

__all__ = [
    "ConfigError", "ExperimentConfig", "ResultRow", "RunFailure", "aggregate", "emit_plot",
    "evaluate", "expand_grid", "from_dict", "load_config", "read_rows", "run_experiment",
]
