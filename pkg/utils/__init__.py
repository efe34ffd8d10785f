"""Shared types, errors, constants and helpers."""

from .errors import (
    CheckpointFormatError,
    ConfigurationError,
    MeshValidationError,
    SgunetError,
    StructuralError,
    TrainingDivergedError,
)
from .types import ModelConfig, ScenarioSpec, Strategy, TrainRun, TransferReport

__all__ = [
    'CheckpointFormatError',
    'ConfigurationError',
    'MeshValidationError',
    'SgunetError',
    'StructuralError',
    'TrainingDivergedError',
    'ModelConfig',
    'ScenarioSpec',
    'Strategy',
    'TrainRun',
    'TransferReport',
]
