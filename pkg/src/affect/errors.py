"""Exception hierarchy for the affect pipeline"""

from typing import Optional


class AffectError(Exception):
    """Base class for all pipeline errors"""


class AnnotationFormatError(AffectError):
    """Malformed annotation file"""

    def __init__(self, path: str, line: int, message: str):
        self.path = path
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class DatasetIndexError(AffectError):
    """Invalid record ordering or duplicate frame in a dataset index"""


class EmptyDistributionError(AffectError):
    """A histogram distribution that would be sampled or normalized is empty"""


class ShapeError(AffectError):
    """Tensor shapes are inconsistent with a layer specification"""

    def __init__(self, dimension: str, expected, actual):
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        super().__init__(f"shape mismatch in {dimension}: expected {expected}, got {actual}")


class DegenerateConfigurationError(AffectError):
    """Point configuration admits no unique similarity transform"""


class ClipIndexError(AffectError):
    """Clip anchor frame outside the video"""


class ConfigError(AffectError):
    """Invalid or unreadable configuration"""


class OutputCollisionError(AffectError):
    """Refusing to overwrite an existing output"""


class StageError(AffectError):
    """A pipeline stage failed"""

    def __init__(self, stage: str, message: str, location: Optional[str] = None):
        self.stage = stage
        self.location = location
        where = f" ({location})" if location else ""
        super().__init__(f"stage '{stage}' failed{where}: {message}")
