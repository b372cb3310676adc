"""Exception hierarchy shared by every gsmap module."""


class GSMapError(Exception):
    """Base class for all library errors."""


class InvalidPrimitiveError(GSMapError, ValueError):
    """A Gaussian primitive has non-finite fields or non-positive scales."""


class ConfigurationError(GSMapError, ValueError):
    """Invalid grid, config document or hyperparameter."""


class ShapeError(GSMapError, ValueError):
    """Array or point-set dimensions do not agree."""


class DegenerateGeometryError(GSMapError, ValueError):
    """Geometry with zero length or area where a positive one is required."""


class InvalidCostError(GSMapError, ValueError):
    """A cost matrix contains non-finite entries."""


class GenerationError(GSMapError, ValueError):
    """A scene recipe cannot be realised inside the grid extent."""


class DivergenceError(GSMapError, ArithmeticError):
    """Optimization produced a non-finite loss or gradient."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss or gradient at iteration {iteration}")
