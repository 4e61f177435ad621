"""Synthetic data, experiment runs, distance reports, sweeps and tables."""

from .experiment import (
    DatasetSource,
    DistanceRow,
    ExperimentConfig,
    ModelSpec,
    collect_results,
    distance_report,
    load_experiment_config,
    run_experiment,
    sweep,
)
from .synthetic import SyntheticConfig, generate_synthetic
from .tables import aggregate, emit_tables
