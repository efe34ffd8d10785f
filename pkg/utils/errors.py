"""
Exception categories for the simulator and their command-line exit codes.
"""


class SgunetError(Exception):
    """Base error carrying a diagnostic category and an exit code."""
    category = "error"
    exit_code = 1


class ConfigurationError(SgunetError, ValueError):
    """Invalid configuration, width mismatch or incompatible transplant."""
    category = "config"
    exit_code = 2


class MeshValidationError(SgunetError, ValueError):
    """A MeshState violates its invariants (bad index, degenerate element)."""
    category = "mesh"
    exit_code = 3


class StructuralError(SgunetError, ValueError):
    """Dangling edge indices, mismatched parameter blocks, unknown names."""
    category = "structure"
    exit_code = 4


class CheckpointFormatError(StructuralError):
    """Checkpoint or trajectory file does not match the expected layout."""
    category = "checkpoint"


class TrainingDivergedError(SgunetError, RuntimeError):
    """Loss became non-finite during training."""
    category = "diverged"
    exit_code = 5
