"""
Discrete Fourier transforms along the node axis.

`numpy.fft` handles every length (mixed-radix with a Bluestein fallback for large prime
factors), so `N = w * (n + n')` need not be a power of two.
"""

import numpy as np

NODE_AXIS = -2


def _node_axis(x: np.ndarray, axis: int) -> int:
    # A bare vector is a single feature column.
    return 0 if x.ndim == 1 else axis


def dft_nodes(x: np.ndarray, axis: int = NODE_AXIS) -> np.ndarray:
    """
    Unnormalized forward DFT, `X[k] = sum_t x[t] exp(-2 pi i k t / N)`, independently
    per feature column.
    """
    x = np.asarray(x)
    axis = _node_axis(x, axis)
    if x.shape[axis] < 1:
        raise ValueError("DFT needs at least one node")
    return np.fft.fft(x, axis=axis)


def idft_nodes(x_hat: np.ndarray, axis: int = NODE_AXIS) -> np.ndarray:
    """
    Inverse DFT with `1/N` normalization, so `idft_nodes(dft_nodes(x)) == x`.
    """
    x_hat = np.asarray(x_hat)
    return np.fft.ifft(x_hat, axis=_node_axis(x_hat, axis))
