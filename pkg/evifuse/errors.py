from pathlib import Path
from typing import Optional, Union


class EvifuseError(Exception):
    """
    Base class for all errors raised by the pipeline.

    Every error carries the process exit code the CLI reports for it and,
    when the error concerns a file, the offending path.
    """

    exit_code: int = 1

    def __init__(self, message: str, path: Optional[Union[str, Path]] = None) -> None:
        super().__init__(message)
        self.message = message
        self.path = str(path) if path is not None else None

    def to_record(self, stage: str = "") -> dict:
        """Return the machine-readable error record written by the CLI."""
        return {
            "schema": "error",
            "stage": stage,
            "type": type(self).__name__,
            "message": self.message,
            "path": self.path,
            "exit_code": self.exit_code,
        }


class ValidationError(EvifuseError, ValueError):
    """Input violates a documented invariant."""

    exit_code = 1


class FormatError(ValidationError):
    """A file exists but its content does not follow the expected format."""


class InputMissingError(EvifuseError, FileNotFoundError):
    """A required input file is absent."""

    exit_code = 2
