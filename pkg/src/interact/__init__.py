"""Bimanual action-chunking policy with hierarchical attention, built on a small numpy autodiff core."""

from .config import ModelConfig, load_config, profile, save_config
from .dataio import (DemoEpisode, NormStats, compute_stats, load_checkpoint, read_episode,
                     save_checkpoint, write_episode)
from .errors import ConfigError, DigestMismatch, DimensionError, FormatError, InteractError, UsageError
from .policy import EnsemblePolicy, InterACT, predict_chunk, train

__all__ = [
    "ConfigError", "DemoEpisode", "DigestMismatch", "DimensionError", "EnsemblePolicy", "FormatError",
    "InterACT", "InteractError", "ModelConfig", "NormStats", "UsageError", "compute_stats",
    "load_checkpoint", "load_config", "predict_chunk", "profile", "read_episode", "save_checkpoint",
    "save_config", "train", "write_episode",
]
