"""Exception hierarchy shared by every qdk module."""


class QdkError(Exception):
    """Base class for all errors raised by qdk."""


class DomainError(QdkError, ValueError):
    """An argument lies outside the domain an operation is defined on."""


class ShapeError(QdkError, ValueError):
    """Tensor extents are incompatible."""


class SolverError(QdkError, ArithmeticError):
    """A linear solve failed (singular or indefinite system)."""


class OptimizationError(QdkError, ArithmeticError):
    """An iterative optimizer diverged."""


class UnsupportedLayerError(QdkError, TypeError):
    """A layer kind has no forward/backward rule."""


class ScheduleError(QdkError, RuntimeError):
    """The simulator could not schedule a program (e.g. dependency cycle)."""


class CapacityError(QdkError, RuntimeError):
    """A tile does not fit in on-chip memory."""


class ConfigError(QdkError, ValueError):
    """A configuration file is missing, malformed or inconsistent."""


class FormatError(QdkError, ValueError):
    """A binary model file is corrupt or has an unknown layout."""
