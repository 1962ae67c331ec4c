"""Residual encoding layer with hand-derived gradients, reference encoders and a small trainer."""

from .encoding import (
    aggregate,
    assign,
    encode_backward,
    encode_forward,
    l2norm_backward,
    l2norm_forward,
    residuals,
)
from .numeric import ShapeError

__version__ = "0.1.0"
