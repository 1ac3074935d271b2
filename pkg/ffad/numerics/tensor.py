"""
A small reverse-mode differentiation kernel over numpy arrays.

Operations executed inside an active `Tape` are appended to it in execution order;
`Tape.backward` replays them in exact reverse. Complex tensors receive gradients in the
convention `dL/dRe + i dL/dIm`, i.e. real and imaginary parts are independent real
coordinates. All data is double precision.
"""

import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .fourier import NODE_AXIS, dft_nodes, idft_nodes

ArrayLike = Union[np.ndarray, float, int, complex]
Backward = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar(
    "ffad_active_tape", default=None
)


class Tensor:
    """
    An array with an optional gradient slot.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(
        self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None
    ):
        data = np.asarray(data)
        if np.iscomplexobj(data):
            data = data.astype(np.complex128, copy=False)
        else:
            data = data.astype(np.float64, copy=False)
        self.data: np.ndarray = data
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.data.dtype})"


@dataclass
class Record:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Backward


class Tape:
    """
    Ordered record of differentiable operations.

    Example::

        with Tape() as tape:
            loss = mse(model_output, target)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: List[Record] = []
        self._token: Optional[contextvars.Token] = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor):
        """
        Populate `.grad` of every leaf tensor with `requires_grad` reachable from the
        scalar `loss`. Gradients accumulate into existing `.grad` values.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec.output) for rec in self.records}
        leaves: Dict[int, Tensor] = {}

        for rec in reversed(self.records):
            grad = grads.pop(id(rec.output), None)
            if grad is None:
                continue
            for inp, g in zip(rec.inputs, rec.backward(grad)):
                if g is None or not inp.requires_grad:
                    continue
                if not inp.is_complex and np.iscomplexobj(g):
                    g = g.real
                key = id(inp)
                grads[key] = grads[key] + g if key in grads else g
                if key not in produced:
                    leaves[key] = inp

        for key, leaf in leaves.items():
            g = np.broadcast_to(grads[key], leaf.shape).astype(leaf.data.dtype)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def _as_tensor(x: Union[Tensor, ArrayLike]) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, backward: Backward) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = _active_tape.get()
    if tape is not None and out.requires_grad:
        tape.records.append(Record(op, tuple(inputs), out, backward))
    return out


def _sum_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Reduce a broadcast gradient back to `shape`.
    """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise


def add(a: Tensor, b: Union[Tensor, ArrayLike]) -> Tensor:
    """
    `a + b`, with `b` broadcast against `a` (bias vectors, constants).
    """
    b = _as_tensor(b)
    return _emit(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    """
    `max(x, 0)`. The subgradient at 0 is 0.
    """
    positive = x.data > 0
    return _emit("relu", (x,), np.where(positive, x.data, 0.0), lambda g: (g * positive,))


def complex_relu(x: Tensor) -> Tensor:
    """
    ReLU applied to real and imaginary parts independently.
    """
    re_pos, im_pos = x.data.real > 0, x.data.imag > 0
    out = np.where(re_pos, x.data.real, 0.0) + 1j * np.where(im_pos, x.data.imag, 0.0)

    def backward(g):
        g = np.asarray(g, dtype=np.complex128)
        return (g.real * re_pos + 1j * (g.imag * im_pos),)

    return _emit("complex_relu", (x,), out, backward)


def square(x: Tensor) -> Tensor:
    return _emit("square", (x,), x.data * x.data, lambda g: (2.0 * g * np.conj(x.data),))


def mean(x: Tensor) -> Tensor:
    size = x.data.size
    return _emit(
        "mean", (x,), np.asarray(x.data.mean()), lambda g: (np.full(x.shape, g / size),)
    )


def real(x: Tensor) -> Tensor:
    """
    Real part. The gradient flows to the real coordinate only.
    """
    return _emit("real", (x,), x.data.real.copy(), lambda g: (g.astype(np.complex128),))


# Shape


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis=axis), backward)


def take(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    """
    Slice `[start, stop)` along `axis`.
    """
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        out = np.zeros(x.shape, dtype=np.result_type(g, x.data))
        out[index] = g
        return (out,)

    return _emit("take", (x,), x.data[index], backward)


# Linear algebra


def matmul(a: Tensor, w: Tensor) -> Tensor:
    """
    `a @ w` for `a` of shape `(..., N, d)` and a shared `w` of shape `(d, e)`.
    Complex operands use the plain (non-conjugating) product.
    """

    def backward(g):
        ga = g @ np.conj(w.data).T
        gw = np.conj(a.data).reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gw

    return _emit("matmul", (a, w), a.data @ w.data, backward)


def conv1d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """
    Cross-correlation along time with zero padding `(k - 1) / 2` on both ends.

    Args:
        x: input of shape `(w, c)` or `(B, w, c)`.
        kernel: `(c_out, c_in, k)` weights with odd `k`.
        bias: `(c_out,)`.

    Returns:
        Output of shape `(w, c_out)` or `(B, w, c_out)`.
    """
    if x.data.ndim == 2:
        batched = reshape(x, (1,) + x.shape)
        out = conv1d_same(batched, kernel, bias)
        return reshape(out, out.shape[1:])

    c_out, c_in, k = kernel.shape
    if k % 2 != 1:
        raise ValueError(f"Kernel size {k} must be odd")
    if x.shape[-1] != c_in or bias.shape != (c_out,):
        raise ValueError(
            f"conv1d shape mismatch: input {x.shape}, kernel {kernel.shape}, "
            f"bias {bias.shape}"
        )

    batch, length, _ = x.shape
    pad = (k - 1) // 2
    padded = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    # cols[b, t, i, j] = padded[b, t + j, i]
    cols = sliding_window_view(padded, k, axis=1)
    out = np.einsum("btij,oij->bto", cols, kernel.data) + bias.data

    def backward(g):
        g_kernel = np.einsum("bto,btij->oij", g, cols)
        g_bias = g.sum(axis=(0, 1))
        g_cols = np.einsum("bto,oij->btij", g, kernel.data)
        g_padded = np.zeros_like(padded)
        for j in range(k):
            g_padded[:, j : j + length, :] += g_cols[..., j]
        return g_padded[:, pad : pad + length, :], g_kernel, g_bias

    return _emit("conv1d_same", (x, kernel, bias), out, backward)


def embed(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """
    Lift each scalar node value to `d` dimensions: `x[..., None] * weight + bias`.
    `bias` is a scalar or a length-`d` vector.
    """
    out = x.data[..., None] * weight.data + bias.data

    def backward(g):
        g_x = g @ weight.data
        g_w = (g * x.data[..., None]).reshape(-1, g.shape[-1]).sum(axis=0)
        return g_x, g_w, _sum_to(g, bias.shape)

    return _emit("embed", (x, weight, bias), out, backward)


# Fourier


def dft(x: Tensor, axis: int = NODE_AXIS) -> Tensor:
    """
    Forward DFT along the node axis.
    """
    n = x.shape[axis]
    # The adjoint of the unnormalized DFT is N times the inverse DFT.
    return _emit("dft", (x,), dft_nodes(x.data, axis), lambda g: (n * idft_nodes(g, axis),))


def idft(x: Tensor, axis: int = NODE_AXIS) -> Tensor:
    """
    Inverse DFT (1/N normalized) along the node axis.
    """
    n = x.shape[axis]
    return _emit("idft", (x,), idft_nodes(x.data, axis), lambda g: (dft_nodes(g, axis) / n,))


def scale_rows(x: Tensor, mask: np.ndarray, theta: Tensor) -> Tensor:
    """
    Multiply masked frequency rows by `sigmoid(theta)` and leave the others unchanged.

    Args:
        x: `(..., N, d)` complex spectrum.
        mask: `(..., N)` boolean selection, treated as a constant.
        theta: scalar parameter.
    """
    alpha = 1.0 / (1.0 + np.exp(-theta.data))
    factors = np.where(mask, alpha, 1.0)[..., None]

    def backward(g):
        g_x = g * factors
        contrib = np.real(g * np.conj(x.data)).sum(axis=-1)
        g_theta = alpha * (1.0 - alpha) * contrib[mask].sum()
        return g_x, np.asarray(g_theta).reshape(theta.shape)

    return _emit("scale_rows", (x, theta), x.data * factors, backward)


# Losses


def mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """
    Mean squared error against a constant target.
    """
    diff = pred.data - np.asarray(target)
    size = diff.size
    return _emit(
        "mse", (pred,), np.asarray(np.mean(diff * diff)), lambda g: (g * 2.0 * diff / size,)
    )


def gradient(t: Tensor) -> np.ndarray:
    """
    Gradient of a leaf, zeros if the loss didn't reach it.
    """
    return t.grad if t.grad is not None else np.zeros_like(t.data)
