"""Continual contrastive learning with relation distillation, salient-dimension
masks, and excitation-guided gradient modulation."""

from . import _kernels
from .errors import (
    CapacityError,
    CheckpointError,
    ConfigError,
    ConfigMismatchError,
    CorruptFileError,
    DataFormatError,
    DegenerateInputError,
    EmptySelectionError,
    LaspError,
    ShapeError,
    VersionMismatchError,
)
from .harness import RunConfig, TrainOverrides, load_run_config, train_continual

__version__ = "0.1.0"

__all__ = [
    "CapacityError",
    "CheckpointError",
    "ConfigError",
    "ConfigMismatchError",
    "CorruptFileError",
    "DataFormatError",
    "DegenerateInputError",
    "EmptySelectionError",
    "LaspError",
    "RunConfig",
    "ShapeError",
    "TrainOverrides",
    "VersionMismatchError",
    "_kernels",
    "load_run_config",
    "train_continual",
    "__version__",
]
