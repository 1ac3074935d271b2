"""
Dense real/complex arrays with tape-based reverse-mode differentiation, and exact DFTs.
"""

from .fourier import dft_nodes, idft_nodes
from .tensor import Tape, Tensor

__all__ = ["dft_nodes", "idft_nodes", "Tape", "Tensor"]
