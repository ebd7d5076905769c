"""Exception types shared across lapo_lab."""

from __future__ import annotations

from typing import Optional


class LapoError(Exception):
    """Base class for every error raised by lapo_lab."""


class ConfigError(LapoError, ValueError):
    """Invalid configuration value or combination."""


class FormatError(LapoError, ValueError):
    """Malformed binary file; messages always name the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ShapeError(LapoError, ValueError):
    """Operand shapes are invalid for a recorded op."""


class NumericError(LapoError, ArithmeticError):
    """A recorded op produced NaN or Inf."""


class NonDeterminismError(LapoError):
    """A function that must be deterministic returned different values."""


class CodecError(LapoError, ValueError):
    """Action component or token outside its valid range."""


class EnvError(LapoError, ValueError):
    """Invalid task, planner failure, or stepping a finished episode."""


class CacheError(LapoError, KeyError):
    """Latent cache is missing a required entry."""


class NumericAbort(LapoError):
    """Training stopped on a non-finite loss; the last good checkpoint is kept."""

    def __init__(self, message: str, checkpoint: Optional[str] = None):
        super().__init__(message)
        self.checkpoint = checkpoint
