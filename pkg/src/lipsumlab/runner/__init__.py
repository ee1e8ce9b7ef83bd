from .checkpoint import Checkpoint, CheckpointFormatError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiment import run
from .report import write_report

__all__ = [
    "Checkpoint",
    "CheckpointFormatError",
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "load_checkpoint",
    "parse_config",
    "run",
    "save_checkpoint",
    "write_report",
]
