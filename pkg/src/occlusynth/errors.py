"""Exception types shared across the pipeline."""


class OcclusynthError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class FormatError(OcclusynthError, ValueError):
    """A file does not conform to its container format."""


class StripIOError(OcclusynthError, OSError):
    """A strip file could not be read completely."""


class EmptyInputError(OcclusynthError, ValueError):
    pass


class InsufficientPointsError(OcclusynthError, ValueError):
    pass


class NoReliableGroundError(OcclusynthError, ValueError):
    pass


class SceneRejected(OcclusynthError):
    """A candidate scene failed a quality gate and should be skipped."""


class ShapeError(OcclusynthError, ValueError):
    pass


class CorruptionError(OcclusynthError):
    pass
