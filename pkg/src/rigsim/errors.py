"""Exception types shared across the package."""


class RigSimError(Exception):
    """Base class for package errors."""


class InputError(RigSimError, ValueError):
    """Malformed or inconsistent input data (files, shapes, parameters)."""


class NumericalError(RigSimError, RuntimeError):
    """A numerical procedure failed (divergence, singular system, line search)."""
