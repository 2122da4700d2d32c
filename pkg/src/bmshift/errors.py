"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A numeric or structural parameter is outside its allowed range."""


class OutOfWindowError(IndexError):
    """A grid index falls outside the simulated window of a path or measure."""


class ConstructionMismatchError(ValueError):
    """A target measure does not satisfy the preconditions of a construction."""
