"""Exceptions raised by the CT counterfactuals package."""

from __future__ import annotations


class CounterfactualError(Exception):
    """Base class for all package errors; `code` keys the CLI exit status."""

    code = "unknown"


class InvalidValueError(CounterfactualError, ValueError):
    """A parameter is outside its documented range."""

    code = "invalid_value"


class ShapeMismatchError(CounterfactualError, ValueError):
    """Two arrays that must agree in shape do not."""

    code = "shape_mismatch"

    def __init__(self, message: str, expected=None, actual=None) -> None:
        if expected is not None or actual is not None:
            message = f"{message}: {tuple(expected or ())} vs {tuple(actual or ())}"
        super().__init__(message)
        self.expected = expected
        self.actual = actual


class InvalidChunkError(CounterfactualError, ValueError):
    """A chunk is empty or leaves the volume."""

    code = "invalid_chunk"


class TapeError(CounterfactualError):
    """Misuse of a gradient tape (mixed tapes, non-scalar output)."""

    code = "tape_error"


class NonFiniteError(CounterfactualError, ArithmeticError):
    """A prediction or loss became NaN or infinite."""

    code = "non_finite"


class TrainingError(CounterfactualError):
    """Training could not start or diverged."""

    code = "training_failed"


class ConfigError(CounterfactualError, ValueError):
    """The run configuration failed validation."""

    code = "malformed_config"

    def __init__(self, message: str, key: str = "invalid_value") -> None:
        super().__init__(message)
        self.key = key


class VolumeFormatError(CounterfactualError):
    """A CTVF file is truncated or has a bad header."""

    code = "malformed_volume"


class ModelFormatError(CounterfactualError):
    """A model checkpoint is truncated or has a bad header."""

    code = "malformed_model"


class MissingFileError(CounterfactualError, FileNotFoundError):
    """A referenced input file does not exist."""

    code = "missing_file"
