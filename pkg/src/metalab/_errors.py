class MetalabError(Exception):
    """Base class for errors raised by metalab."""


class ValidationError(MetalabError, ValueError):
    """Input object violates a structural invariant (shapes, normalization, support)."""


class DegenerateMeasureError(MetalabError, ZeroDivisionError):
    """A density ratio would divide by a zero-mass entry."""


class NonFiniteError(MetalabError, FloatingPointError):
    """An iterate, gradient or objective value became inf/nan."""
