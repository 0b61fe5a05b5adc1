"""metalab: exact-oracle meta-learning on finite MDPs and finite-domain regression."""
from ._errors import DegenerateMeasureError, MetalabError, NonFiniteError, ValidationError

__version__ = "0.1.0"

__all__ = [
    "DegenerateMeasureError",
    "MetalabError",
    "NonFiniteError",
    "ValidationError",
]
