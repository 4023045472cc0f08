"""Exception types raised across the package."""


class SparseMaskError(Exception):
    """Base class for all package errors."""


class ShapeError(SparseMaskError, ValueError):
    """Operand shapes are incompatible."""


class GradientError(SparseMaskError, ValueError):
    """Backward pass or optimizer received an invalid gradient."""


class ArchitectureError(SparseMaskError, ValueError):
    """A connectivity graph or architecture violates its invariants."""


class SchemaError(SparseMaskError, ValueError):
    """A JSON document does not match the expected schema."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class ConfigError(SparseMaskError, ValueError):
    """Invalid run configuration."""
