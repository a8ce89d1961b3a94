"""Exception types shared across the package.

Every error raised by neucalib derives from :class:`NeucalibError` so the
CLI can map library failures to a nonzero exit code in one place.
"""


class NeucalibError(Exception):
    """Base class for all neucalib errors."""


class ShapeError(NeucalibError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(NeucalibError):
    """A value lies outside the mathematical domain of an operation."""


class ParameterError(NeucalibError):
    """An operation parameter (delta, axis, channel count, ...) is invalid."""


class StateError(NeucalibError):
    """An object is used in a way its lifecycle forbids (e.g. tape reuse)."""


class NormalizationError(NeucalibError):
    """A feature row has zero norm and cannot be unit-normalized."""


class DegenerateBatchError(NeucalibError):
    """A loss has no usable anchors left after pair filtering."""


class SolveError(NeucalibError):
    """Pose solving failed: too few correspondences, degenerate geometry,
    or singular normal equations."""


class GenerationError(NeucalibError):
    """Synthetic scene generation could not satisfy its constraints."""


class ConfigError(NeucalibError):
    """A configuration or serialized file is malformed or inconsistent."""


class TrainingError(NeucalibError):
    """The training loop hit an unrecoverable condition."""
