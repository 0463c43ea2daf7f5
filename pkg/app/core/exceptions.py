from pathlib import Path
from typing import Optional


class DiscreteJepaError(Exception):
    """Base class for all domain errors raised by this package."""


class ConfigurationError(DiscreteJepaError):
    pass


class ShapeMismatchError(DiscreteJepaError, ValueError):
    pass


class NonFiniteError(DiscreteJepaError, ValueError):
    pass


class ArtifactError(DiscreteJepaError):
    """An on-disk artifact is missing, unreadable or inconsistent."""

    def __init__(self, path: Path | str, message: str):
        self.path = Path(path)
        super().__init__(f"{message}: {self.path}")


class ManifestError(ArtifactError):
    pass


class DatasetCorruptionError(ArtifactError):
    pass


class CheckpointError(ArtifactError):
    pass


class ArtifactWriteError(ArtifactError):
    pass


class NonFiniteLossError(DiscreteJepaError):
    def __init__(self, step: int, dump_path: Optional[Path] = None):
        self.step = step
        self.dump_path = dump_path
        detail = f" (diagnostics written to {dump_path})" if dump_path else ""
        super().__init__(f"Non-finite loss at step {step}{detail}")


class StageFailedError(DiscreteJepaError):
    def __init__(self, stage: str, last_good: Optional[str], cause: BaseException):
        self.stage = stage
        self.last_good = last_good
        self.cause = cause
        super().__init__(
            f"Stage '{stage}' failed: {cause} (last good artifact: {last_good or 'none'})"
        )
