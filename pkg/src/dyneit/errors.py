"""Exception types shared across the package."""


class DynEITError(Exception):
    """Base class for all package errors."""


class ParameterError(DynEITError, ValueError):
    """Infeasible or inconsistent input parameters."""


class GeometryError(DynEITError, ValueError):
    """Degenerate mesh geometry."""

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class MeshParseError(DynEITError, ValueError):
    """Malformed mesh file. ``lineno`` is 1-based."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ValidationError(DynEITError, ValueError):
    """A data structure violates one of its invariants."""


class PreconditionError(DynEITError, ValueError):
    """An operation was called outside its domain (e.g. conductivity below bounds)."""


class SolverError(DynEITError, RuntimeError):
    """A linear solve failed or did not reach the requested residual."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericError(DynEITError, ArithmeticError):
    """Non-finite values or non-convergence inside an iteration."""

    def __init__(self, message, frame=None):
        if frame is not None:
            message = f"frame {frame}: {message}"
        super().__init__(message)
        self.frame = frame


class DependencyError(DynEITError, RuntimeError):
    """A required intermediate result is missing."""
