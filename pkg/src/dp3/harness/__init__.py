"""Configuration, dataset and metrics I/O, and the ``dp3`` command line."""
from .config import ConfigError, ExperimentConfig, build_config, json_schema, load_config
from .dataset import DatasetError, dataset_bytes, load_dataset, read_episodes, save_dataset, write_episodes
from .metrics import MetricsReport, aligned_table, scatter_csv
from .runner import ABLATION_AXES, ablation_arms, generate_demos, run_ablation, run_eval, run_train

__all__ = [
    "ABLATION_AXES",
    "ConfigError",
    "DatasetError",
    "ExperimentConfig",
    "MetricsReport",
    "ablation_arms",
    "aligned_table",
    "build_config",
    "dataset_bytes",
    "generate_demos",
    "json_schema",
    "load_config",
    "load_dataset",
    "read_episodes",
    "run_ablation",
    "run_eval",
    "run_train",
    "save_dataset",
    "scatter_csv",
    "write_episodes",
]
