"""Wireless virtual graphs and information-carrying GNNs for downlink power control."""
from .exceptions import (BracketError, DecompositionError, NonFiniteError, ShapeError,
                         SingularMatrixError)
from .graph import Permutation, WvgGraph, apply_permutation
from .model import IcgnnModel, icgnn_forward
from .tensor import Tape, Tensor, gradcheck

__version__ = "0.1.0"
