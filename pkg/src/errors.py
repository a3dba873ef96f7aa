"""Exception hierarchy for the open-distill package.

Every error derives from ``OpenDistillError`` so the CLI can turn it into a
non-zero exit code, and from the closest builtin so library callers can keep
catching ``ValueError`` / ``FileNotFoundError`` / ``RuntimeError``.
"""

from pathlib import Path


class OpenDistillError(Exception):
    """Base class for all package errors"""


class MeshParseError(OpenDistillError, ValueError):
    """Raised when an OFF file cannot be parsed"""

    def __init__(self, path: Path | str, line: int, reason: str):
        self.path = Path(path)
        self.line = line
        self.reason = reason
        super().__init__(f"{self.path}: line {line}: {reason}")


class DegenerateMeshError(OpenDistillError, ValueError):
    """Raised when a mesh has no surface to sample from"""


class DatasetLayoutError(OpenDistillError, ValueError):
    """Raised when a dataset root does not follow the ModelNet layout"""


class CacheFormatError(OpenDistillError, ValueError):
    """Raised when a split cache file cannot be decoded"""


class CacheVersionError(CacheFormatError):
    """Raised when a cache file was written by an incompatible format version"""


class CacheTruncatedError(CacheFormatError):
    """Raised when a cache file ends before its declared content"""


class PseudoOpenSetError(OpenDistillError, ValueError):
    """Raised when pseudo open set samples cannot be generated"""


class InvalidProbabilityError(OpenDistillError, ValueError):
    """Raised when a vector is not a valid probability distribution"""


class IncompatibleTeacherError(OpenDistillError, ValueError):
    """Raised when a teacher checkpoint does not match the training split"""


class TrainingDivergedError(OpenDistillError, RuntimeError):
    """Raised when a training step produces a non-finite loss"""


class ManifestError(OpenDistillError, ValueError):
    """Raised for manifest collisions, busy output directories and bad sweeps"""


class ReportWriteError(OpenDistillError, OSError):
    """Raised when report files cannot be written"""


class MissingArtifactError(OpenDistillError, FileNotFoundError):
    """Raised when a command needs an artifact another command produces"""

    def __init__(self, path: Path | str, producer: str):
        self.path = Path(path)
        self.producer = producer
        super().__init__(
            f"Missing artifact {self.path}. Run `python -m src {producer}` first."
        )
