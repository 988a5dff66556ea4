"""Experiment configuration, seeded runs, records, plots."""

from .config import ConfigError, ExperimentSpec, get_preset, load_spec, parse_spec
from .records import RunRecord, aggregate, emit_csv, episodes_to_threshold
from .runner import run_experiment, run_one

__all__ = [
    "ConfigError", "ExperimentSpec", "RunRecord", "aggregate", "emit_csv",
    "episodes_to_threshold", "get_preset", "load_spec", "parse_spec",
    "run_experiment", "run_one",
]
