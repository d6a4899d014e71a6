"""Exception types shared across the package.

Exit-code mapping for the CLI: ConfigError and usage problems exit 2,
everything else here exits 1.
"""


class ShapeError(ValueError):
    """Tensor or map dimensions violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid or unknown configuration value. Carries the offending key path."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class MissingGraphError(RuntimeError):
    """backward() was called on a tensor with no recorded computation."""


class VocabularyError(ValueError):
    """A token or phrase is outside the known vocabulary."""


class DatasetError(RuntimeError):
    """A dataset directory is missing, incomplete, or malformed."""


class EvaluationError(RuntimeError):
    """A metric could not be computed (e.g. empty validity mask)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries task and step."""

    def __init__(self, task: str, step: int, value: float):
        self.task = task
        self.step = step
        super().__init__(f"non-finite loss {value!r} for task {task!r} at step {step}")


class CheckpointError(RuntimeError):
    """Base class for checkpoint file problems."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class LockError(RuntimeError):
    """Another process holds the output-directory lock."""
