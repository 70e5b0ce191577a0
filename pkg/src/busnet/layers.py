"""Parameterized building blocks: convolution blocks, linear maps, dropout
and the LSTM cell."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .tensor import ConvSpec, Tensor


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def he_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


class Module:
    """Minimal container that discovers parameters and submodules by attribute."""

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            for child in _children(value):
                yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _children(value) -> list[Module]:
    if isinstance(value, Module):
        return [value]
    if isinstance(value, (list, tuple)):
        return [v for v in value if isinstance(v, Module)]
    if isinstance(value, dict):
        return [v for v in value.values() if isinstance(v, Module)]
    return []


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


# --- dropout ----------------------------------------------------------------
def dropout(x: Tensor, rate: float, training: bool, rng_seed: int, counter: int = 0) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1 - rate); eval mode is identity."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    rng = np.random.default_rng([rng_seed, counter])
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(x.dtype) / x.dtype.type(1 - rate)
    return x * Tensor._wrap(scale)


class Dropout(Module):
    """Dropout layer with its own seed; each training call advances a counter."""

    def __init__(self, rate: float, seed: int):
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.seed = seed
        self.calls = 0

    def __call__(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0:
            return x
        self.calls += 1
        return dropout(x, self.rate, True, self.seed, self.calls)


# --- convolution ----------------------------------------------------------------
class ConvBlock(Module):
    """Convolution, then optional activation, then optional dropout."""

    def __init__(
        self,
        spec: ConvSpec,
        rng: np.random.Generator,
        activation: str | None = "relu",
        dropout_rate: float = 0.0,
        dropout_seed: int = 0,
    ):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        self.weight = he_uniform(
            rng, (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel), fan_in
        )
        self.bias = parameter(np.zeros(spec.out_channels))
        self.activation = activation
        self.drop = Dropout(dropout_rate, dropout_seed) if dropout_rate else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.cross_correlate2d(x, self.weight, self.spec, self.bias)
        if self.activation:
            y = T.activation(y, self.activation)
        if self.drop is not None:
            y = self.drop(y)
        return y


# --- linear -------------------------------------------------------------------
def linear(weights: Tensor, bias: Tensor, x: Tensor) -> Tensor:
    """Wx + b.

    ``x`` may be a vector (n,), a column (n, 1) paired with a column bias
    (m, 1), or a batch of rows (N, n), in which case rows map to rows.
    """
    m, n = weights.shape
    if bias.shape not in ((m,), (m, 1)):
        raise DimensionError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    column = x.ndim == 1 or (x.ndim == 2 and bias.ndim == 2 and x.shape[1] == 1)
    if (x.shape[0] if column else x.shape[-1]) != n:
        raise DimensionError(f"input shape {x.shape} does not match weights {weights.shape}")
    if column:
        return weights @ x + (bias if x.ndim == 2 else bias.reshape(m))
    return x @ weights.T + bias.reshape(m)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(rng.uniform(-bound, bound, size=(n_out, n_in)))
        self.bias = parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return linear(self.weight, self.bias, x)


# --- LSTM -------------------------------------------------------------------------
_GATES = ("f", "i", "o", "c")


class LSTMCellParams(Module):
    """Gate weights W_g (m x n), recurrent weights U_g (m x m) and biases b_g (m,)
    for the forget, input, output and candidate paths."""

    def __init__(self, n: int, m: int, rng: np.random.Generator | None = None, zeros: bool = False):
        if n < 1 or m < 1:
            raise ConfigError("LSTM sizes must be positive")
        self.n, self.m = n, m
        bound = 1.0 / np.sqrt(m)

        def draw(shape):
            if zeros or rng is None:
                return parameter(np.zeros(shape))
            return parameter(rng.uniform(-bound, bound, size=shape))

        for g in _GATES:
            setattr(self, f"W_{g}", draw((m, n)))
        for g in _GATES:
            setattr(self, f"U_{g}", draw((m, m)))
        for g in _GATES:
            init = 1.0 if (g == "f" and not zeros and rng is not None) else 0.0
            setattr(self, f"b_{g}", parameter(np.full(m, init)))

    def set(self, **values) -> "LSTMCellParams":
        """Overwrite named parameters in place, e.g. ``set(b_f=[30.0])``."""
        for name, v in values.items():
            current = getattr(self, name)
            current.data = np.broadcast_to(
                np.asarray(v, dtype=current.dtype), current.shape
            ).copy()
        return self


@dataclass
class LSTMState:
    h: Tensor
    c: Tensor


def _as_rows(v: Tensor) -> tuple[Tensor, bool]:
    # column vectors (k,) / (k, 1) are handled as a single row batch
    if v.ndim == 1:
        return v.reshape(1, v.shape[0]), True
    return v, False


def lstm_cell_step(params: LSTMCellParams, x: Tensor, prev: LSTMState) -> LSTMState:
    """One LSTM step.

    f = sig(W_f x + U_f h + b_f), i = sig(W_i x + U_i h + b_i),
    o = sig(W_o x + U_o h + b_o), c' = f*c + i*tanh(W_c x + U_c h + b_c),
    h' = o*tanh(c').

    ``x`` is either a vector of length n or a batch of rows (N, n); the
    state follows the same layout with m in place of n.
    """
    xr, single = _as_rows(x)
    hr, _ = _as_rows(prev.h)
    cr, _ = _as_rows(prev.c)
    if xr.shape[-1] != params.n or hr.shape[-1] != params.m or cr.shape[-1] != params.m:
        raise DimensionError(
            f"LSTM(n={params.n}, m={params.m}) got x {x.shape}, h {prev.h.shape}, c {prev.c.shape}"
        )

    def pre(g: str) -> Tensor:
        W = getattr(params, f"W_{g}")
        U = getattr(params, f"U_{g}")
        b = getattr(params, f"b_{g}")
        return xr @ W.T + hr @ U.T + b

    f = T.sigmoid(pre("f"))
    i = T.sigmoid(pre("i"))
    o = T.sigmoid(pre("o"))
    c = f * cr + i * T.tanh(pre("c"))
    h = o * T.tanh(c)
    if single:
        return LSTMState(h.reshape(params.m), c.reshape(params.m))
    return LSTMState(h, c)


def zero_state(params: LSTMCellParams, batch: int | None = None) -> LSTMState:
    shape = (params.m,) if batch is None else (batch, params.m)
    dtype = params.W_f.dtype
    return LSTMState(Tensor._wrap(np.zeros(shape, dtype)), Tensor._wrap(np.zeros(shape, dtype)))


def lstm_sequence(params: LSTMCellParams, xs: Sequence[Tensor]) -> list[Tensor]:
    """Unroll the cell from a zero state; returns every hidden state in order."""
    if len(xs) == 0:
        raise UsageError("lstm_sequence needs a non-empty sequence")
    first, single = _as_rows(xs[0])
    state = zero_state(params, None if single else first.shape[0])
    hs = []
    for x in xs:
        state = lstm_cell_step(params, x, state)
        hs.append(state.h)
    return hs
