"""Semi-supervised object detection with per-iteration pseudo labeling on synthetic shapes."""
from .config import ArchConfig, AugmentConfig, ConfigError, Mode, TrainConfig, load_config
from .synthdata import Dataset, load_dataset, make_dataset, save_dataset
from .trainer import train

__all__ = [
    "ArchConfig", "AugmentConfig", "ConfigError", "Mode", "TrainConfig", "load_config",
    "Dataset", "load_dataset", "make_dataset", "save_dataset", "train",
]
