"""Tug-guided planar robot stack: plant, learning, detection, navigation,
experiments, and a live session service."""

__version__ = "0.1.0"

from .core import (
    BaseVelocity,
    CommandVelocity,
    ConfigError,
    ContractViolation,
    ForceVector,
    Pose2,
    SimConfig,
    load_config,
    make_rng,
    sample_command,
    wrap_angle,
)

__all__ = [
    "BaseVelocity",
    "CommandVelocity",
    "ConfigError",
    "ContractViolation",
    "ForceVector",
    "Pose2",
    "SimConfig",
    "load_config",
    "make_rng",
    "sample_command",
    "wrap_angle",
    "__version__",
]
