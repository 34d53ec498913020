"""Experiment orchestration: configuration, training, evaluation, checkpoints, CLI."""
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config, parse_config, serialize_config
from .train import MetricsRow, evaluate, train, win_rate
