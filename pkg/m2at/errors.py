"""Exception hierarchy for the lab.

Every error subclasses ``ValueError`` so callers that only know the generic
contract (``except ValueError``) keep working.
"""
from __future__ import annotations

from typing import Optional


class LabError(ValueError):
    """Base class for all lab errors."""


class ShapeError(LabError):
    """Operand shapes are incompatible for an operation."""


class NonFiniteError(LabError):
    """A NaN or Inf was produced or consumed."""

    def __init__(self, message: str, batch_index: Optional[int] = None):
        super().__init__(message)
        self.batch_index = batch_index


class PrecisionError(LabError):
    """Operation requires 64-bit mode."""


class ConfigError(LabError):
    """Invalid configuration value or unknown key."""


class DatasetError(LabError):
    """Dataset file violates the expected binary format."""


class CheckpointError(LabError):
    """Checkpoint file is corrupt or of a foreign format."""


class AttackError(LabError):
    """Attack generation failed."""


class TrainingError(LabError):
    """Training loop hit an unrecoverable condition."""


class MaskError(LabError):
    """Mask is not binary or does not fit the image."""
