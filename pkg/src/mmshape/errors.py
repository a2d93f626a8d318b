"""Exception types shared across the package."""


class MMShapeError(Exception):
    """Base class for all package errors."""


class InputError(MMShapeError, ValueError):
    """Malformed input: wrong lengths, bad domains, functions outside H_0."""


class ParameterError(MMShapeError, ValueError):
    """A scalar parameter is outside its admissible range."""


class ResourceError(MMShapeError, RuntimeError):
    """A request exceeds a configured size budget."""
