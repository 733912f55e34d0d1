"""Error taxonomy shared by all modules."""


class ParameterError(ValueError):
    """A value passed to an operation is outside its valid range."""


class ShapeError(ValueError):
    """Array shapes or dimensions are incompatible."""


class DataError(ValueError):
    """A corpus or manifest is empty, degenerate, or malformed."""


class DependencyError(RuntimeError):
    """A required checkpoint or upstream artifact is missing."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""
