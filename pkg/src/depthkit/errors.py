"""Exception types raised across depthkit."""

from __future__ import annotations


class DepthKitError(Exception):
    """Base class for all depthkit errors."""


class ConfigurationError(DepthKitError, ValueError):
    """Invalid parameters: bad camera intrinsics, stride, channel count, ..."""


class ShapeError(DepthKitError, ValueError):
    """Array shapes that do not agree with each other."""


class DomainError(DepthKitError, ValueError):
    """Input outside the domain of an operation (pixel out of range, non-unit ray)."""


class DegenerateInputError(DepthKitError, ValueError):
    """Input with nothing to compute on, e.g. an empty valid mask."""


class ConvergenceError(DepthKitError, ArithmeticError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual
