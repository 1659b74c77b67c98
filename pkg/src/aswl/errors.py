"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A numeric argument lies outside its mathematical domain."""


class DescriptorError(ValueError):
    """An architecture descriptor failed to parse or validate."""


class FormatError(ValueError):
    """A file does not conform to its binary format."""


class StateError(RuntimeError):
    """An operation was invoked in an invalid state (e.g. empty tape)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
