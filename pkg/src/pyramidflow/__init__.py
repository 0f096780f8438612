"""Feature pyramids with direct backbone supervision, on a from-scratch autograd engine."""
from .tensor import Parameter, Tape, Tensor, backward

__version__ = "0.1.0"

__all__ = ["Parameter", "Tape", "Tensor", "backward", "__version__"]
