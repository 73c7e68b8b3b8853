"""Desk-scale adversarial robustness distillation: autodiff core, objectives, attacks, trainer and benchmarks."""
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    GraphError,
    MMARDError,
    NumericError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "GraphError",
    "MMARDError",
    "NumericError",
    "ShapeError",
    "__version__",
]
