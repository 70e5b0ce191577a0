"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded (in
execution order, hence topologically) whenever at least one input is a
learnable leaf or itself recorded on that tape. Outside a tape every
operation is a plain NumPy computation, which is how evaluation runs.

Working precision is float32; :func:`precision` switches the default to
float64 for gradient checks.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .errors import ConfigError, DimensionError, UsageError

_default_dtype: type = np.float32
_tape_stack: list["Tape"] = []


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported working precision {dtype!r}")
    _default_dtype = dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@dataclass
class _Node:
    output: "Tensor"
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; operations run inside the ``with`` block are
    recorded here.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def tracks(self, t: "Tensor") -> bool:
        return t.requires_grad or t._tape is self

    def record(self, output: "Tensor", inputs, backward_fn) -> None:
        output._tape = self
        output.tape_id = len(self.nodes)
        self.nodes.append(_Node(output, tuple(inputs), backward_fn))

    def backward(self, loss: "Tensor") -> dict["Tensor", np.ndarray]:
        return backward(loss, self)


def active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


class Tensor:
    """N-dimensional float array that can take part in a :class:`Tape`."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = False
        t.grad = None
        t.tape_id = None
        t._tape = None
        return t

    # --- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other, self), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def max(self, axis: int, keepdims=False):
        return amax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def backward(self) -> dict["Tensor", np.ndarray]:
        if self._tape is None:
            raise UsageError("tensor was not recorded on a tape")
        return backward(self, self._tape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=like.dtype))


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every learnable leaf.

    Returns a map from each reached learnable leaf to the gradient
    contributed by this call.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or loss._tape
    seed = np.ones_like(loss.data)
    found: dict[Tensor, np.ndarray] = {}

    def deposit(t: Tensor, g: np.ndarray) -> None:
        if t in found:
            found[t] = found[t] + g
        else:
            found[t] = g

    if loss._tape is None or tape is None or loss._tape is not tape:
        if loss.requires_grad:
            deposit(loss, seed)
    else:
        pending: dict[int, np.ndarray] = {loss.tape_id: seed}
        for node in reversed(tape.nodes[: loss.tape_id + 1]):
            g = pending.pop(node.output.tape_id, None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if t._tape is tape:
                    prev = pending.get(t.tape_id)
                    pending[t.tape_id] = gi if prev is None else prev + gi
                elif t.requires_grad:
                    deposit(t, gi)
    for t, g in found.items():
        t.grad = g.copy() if t.grad is None else t.grad + g
    return found


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise arithmetic ----------------------------------------------
def add(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a = _lift(a, b) if not isinstance(a, Tensor) else a
    b = _lift(b, a)
    out = a.data / b.data
    return _result(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _result(
        out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),)
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def grads(g):
        if b.ndim == 1:
            ga = np.multiply.outer(g, b.data)
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g[..., None], b.shape + (1,))
            return _unbroadcast(ga, a.shape), gb.reshape(b.shape)
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), grads)


# --- shape manipulation ---------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return _result(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),)
    )


def getitem(a: Tensor, index) -> Tensor:
    def grads(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), grads)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, offsets, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    def grads(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), grads)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """Join NCHW tensors along the channel axis, preserving input order."""
    if len(inputs) == 0:
        raise UsageError("concat_channels needs at least one input")
    first = inputs[0]
    for t in inputs:
        if t.ndim != 4 or (t.shape[0], *t.shape[2:]) != (first.shape[0], *first.shape[2:]):
            raise DimensionError(
                f"concat_channels spatial mismatch: {[x.shape for x in inputs]}"
            )
    if len(inputs) == 1:
        return first
    return concat(inputs, axis=1)


# --- reductions -----------------------------------------------------------
def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _result(
        np.sum(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),),
    )


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return _result(
        np.mean(a.data, axis=axis, keepdims=keepdims),
        (a,),
        lambda g: (_expand_reduced(g / count, a.shape, axis, keepdims).copy(),),
    )


def amax(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; ties send the gradient to the first maximum."""
    idx = np.argmax(a.data, axis=axis)
    idx_kept = np.expand_dims(idx, axis)
    out = np.take_along_axis(a.data, idx_kept, axis=axis)

    def grads(g):
        full = np.zeros_like(a.data)
        if not keepdims:
            g = np.expand_dims(g, axis)
        np.put_along_axis(full, idx_kept, g, axis=axis)
        return (full,)

    return _result(out if keepdims else np.squeeze(out, axis), (a,), grads)


# --- elementwise nonlinearities ------------------------------------------
def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


def relu(a: Tensor) -> Tensor:
    positive = a.data > 0
    return _result(a.data * positive, (a,), lambda g: (g * positive,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    return _result(
        np.logaddexp(np.zeros((), a.dtype), a.data),
        (a,),
        lambda g: (g * special.expit(a.data),),
    )


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = special.log_softmax(a.data, axis=axis)

    def grads(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), grads)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(a)


# --- convolution family ---------------------------------------------------
@dataclass(frozen=True)
class ConvSpec:
    """Geometry of one convolution layer (square kernels)."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        for name in ("in_channels", "out_channels", "kernel", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ConvSpec.{name} must be positive")
        if self.padding < 0:
            raise ConfigError("ConvSpec.padding must be non-negative")


def conv_output_shape(in_extent: int, spec: ConvSpec, dim: str = "width") -> int:
    """Output extent (W1 - F + 2P) / S + 1; output depth is ``spec.out_channels``."""
    span = in_extent - spec.kernel + 2 * spec.padding
    if span < 0:
        raise ConfigError(
            f"{dim} {in_extent} too small for kernel {spec.kernel} with padding {spec.padding}"
        )
    if span % spec.stride:
        raise ConfigError(
            f"{dim}: ({in_extent} - {spec.kernel} + 2*{spec.padding}) not divisible by stride {spec.stride}"
        )
    return span // spec.stride + 1


def cross_correlate2d(
    x: Tensor, kernels: Tensor, spec: ConvSpec, bias: Tensor | None = None
) -> Tensor:
    """Zero-padded 2-D cross-correlation over NCHW input (no kernel flip)."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise DimensionError(
            f"input {x.shape} does not match in_channels={spec.in_channels}"
        )
    expected = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
    if kernels.shape != expected:
        raise DimensionError(f"kernel shape {kernels.shape}, expected {expected}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"bias shape {bias.shape}, expected ({spec.out_channels},)")
    n, _, h, w = x.shape
    ho = conv_output_shape(h, spec, "height")
    wo = conv_output_shape(w, spec, "width")
    k, s, p = spec.kernel, spec.stride, spec.padding

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if k == 1:
        windows = xp[:, :, ::s, ::s][..., None, None]
    else:
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    out = np.tensordot(windows, kernels.data, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data[:, None, None]

    def grads(g):
        gk = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        # per-offset input contributions: (N, Ho, Wo, C, F, F)
        contrib = np.tensordot(g, kernels.data, axes=([1], [0]))
        gxp = np.zeros_like(xp)
        for m in range(k):
            for q in range(k):
                gxp[:, :, m : m + s * ho : s, q : q + s * wo : s] += contrib[
                    ..., m, q
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, kernels, bias) if bias is not None else (x, kernels)
    return _result(out, inputs, grads)


def max_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Windowed maximum; the first maximum in row-major order gets the gradient."""
    stride = stride or window
    n, c, h, w = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than extent {(h, w)}")
    if window == stride and (h % stride or w % stride):
        raise DimensionError(f"extent {(h, w)} not divisible by stride {stride}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    windows = sliding_window_view(x.data, (window, window), axis=(2, 3))[
        :, :, ::stride, ::stride
    ][:, :, :ho, :wo]
    flat = windows.reshape(n, c, ho, wo, window * window)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def grads(g):
        gx = np.zeros_like(x.data)
        for m in range(window):
            for q in range(window):
                hit = idx == m * window + q
                gx[:, :, m : m + stride * ho : stride, q : q + stride * wo : stride] += g * hit
        return (gx,)

    return _result(out, (x,), grads)


def _upsample_matrix(extent: int, dtype) -> np.ndarray:
    # half-pixel centres (corners not aligned), edge-clamped sampling
    out = np.zeros((2 * extent, extent), dtype=dtype)
    for o in range(2 * extent):
        src = min(max((o + 0.5) / 2 - 0.5, 0.0), extent - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, extent - 1)
        frac = src - lo
        out[o, lo] += 1 - frac
        out[o, hi] += frac
    return out


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of H and W (half-pixel convention, no corner alignment)."""
    if x.ndim != 4:
        raise DimensionError(f"upsample2x expects NCHW, got {x.shape}")
    uh = _upsample_matrix(x.shape[2], x.dtype)
    uw = _upsample_matrix(x.shape[3], x.dtype)
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,))
