"""Exceptions raised by nightreid."""


class NightReIDError(Exception):
    """Base exception for nightreid errors."""


class InvalidArgumentError(NightReIDError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class ConfigError(NightReIDError):
    """Configuration document or override is invalid."""


class ManifestParseError(NightReIDError):
    """A manifest record could not be parsed."""

    def __init__(self, path, line: int, reason: str) -> None:
        """Initialize the error."""
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class DatasetValidationError(NightReIDError):
    """A dataset violates one of its invariants."""


class CheckpointError(NightReIDError):
    """Base exception for checkpoint archive errors."""


class IncompatibleCheckpointError(CheckpointError):
    """Checkpoint was written with an unsupported format version."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint is truncated or fails its checksum."""


class MissingParametersError(NightReIDError):
    """A subnet required by the operation is not loaded."""


class EvaluationError(NightReIDError):
    """Evaluation could not produce a report."""
