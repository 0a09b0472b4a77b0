# Copyright 2026 The dlostate authors
"""Exceptions raised across dlostate.

Every error carries a short ``category`` string so that the CLI can report
failures in a machine-parsable ``E: <category>: <message>`` form, and an
``exit_code`` used when the process exits.
"""

from __future__ import annotations


class DloStateError(Exception):
    """Base class for all dlostate errors."""

    category: str = "error"
    exit_code: int = 1


class ContractError(DloStateError, ValueError):
    """An operation was called with inputs violating its contract."""

    category = "contract"
    exit_code = 3


class ConfigError(DloStateError):
    """A configuration value or key is invalid."""

    category = "config"
    exit_code = 4


class DataFormatError(DloStateError):
    """A file on disk does not follow the expected binary/text layout."""

    category = "data-format"
    exit_code = 5


class CheckpointError(DataFormatError):
    """A checkpoint is missing, corrupt, or incompatible."""

    category = "checkpoint"
    exit_code = 6


class UnusableFrameError(DloStateError):
    """A frame has too few points left to feed the estimator."""

    category = "unusable-frame"
    exit_code = 7


class FusionFallback(DloStateError):
    """Fusion could not be carried out; callers fall back to regression."""

    category = "fusion-fallback"
    exit_code = 8


class TrainingDiverged(DloStateError):
    """A non-finite loss was produced during training."""

    category = "diverged"
    exit_code = 9


class SimulationError(DloStateError):
    """Rope relaxation did not converge."""

    category = "simulation"
    exit_code = 10


class OutputError(DloStateError):
    """An output location cannot be created or written."""

    category = "io"
    exit_code = 11
