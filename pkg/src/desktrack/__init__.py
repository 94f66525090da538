"""Desk-scale one-stream transformer tracker with probability-guided token pruning
and selective template attention."""

from .config import ModelConfig, TrackConfig, TrainConfig, RunConfig, ConfigError
from .tokens import BoundingBox

__version__ = "0.1.0"
