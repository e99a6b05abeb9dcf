"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. Every differentiable operation is a
``Function`` subclass: ``apply`` runs ``forward`` on the raw arrays and, when
any input requires a gradient, records itself on the output. ``GradGraph``
walks those records from a scalar loss back to the leaves.

Binary elementwise operations require equal shapes; there is no broadcasting.
Convolutions are zero-padded "same" convolutions with odd kernel extents,
computed as an im2col product (``sliding_window_view`` + ``tensordot``).

Two precision modes: float32 (default, training) and float64 (verification).
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from stpf.config import (
    ConfigurationError,
    DimensionError,
    MissingGradientError,
    NumericError,
    UsageError,
)
from stpf.models import Precision

logger = logging.getLogger(__name__)

# Process-wide modes. A graph is single-owner, so plain module state is enough.
_precision: Precision = Precision.SINGLE
_grad_enabled: bool = True


def get_precision() -> Precision:
    return _precision


def default_dtype() -> np.dtype:
    return np.dtype(_precision.value)


@contextlib.contextmanager
def precision(mode: Precision | str) -> Iterator[Precision]:
    """Temporarily switch the dtype used for newly created tensors."""
    global _precision
    previous = _precision
    _precision = Precision(mode)
    try:
        yield _precision
    finally:
        _precision = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording them for backward()."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled() -> bool:
    return _grad_enabled


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    """An N-dimensional array that can take part in a gradient graph."""

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: np.dtype | type | None = None,
        name: str = "",
    ) -> None:
        self.data: np.ndarray = np.array(data, dtype=dtype or default_dtype())
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: Function | None = None
        self.name = name

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool, op: Function | None) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.op = op
        out.name = ""
        return out

    # --- Introspection ---

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
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data, requires_grad=False, op=None)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    # --- Operators ---

    def __add__(self, other: Tensor) -> Tensor:
        return elementwise("add", self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return elementwise("sub", self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return elementwise("mul", self, other)

    def sigmoid(self) -> Tensor:
        return Sigmoid.apply(self)

    def tanh(self) -> Tensor:
        return Tanh.apply(self)

    def relu(self) -> Tensor:
        return Relu.apply(self)

    def sum(self) -> Tensor:
        return Sum.apply(self)

    def backward(self) -> dict[Tensor, np.ndarray]:
        """Backpropagate from this scalar; returns gradients of the leaves."""
        return GradGraph(self).backward()


# ---------------------------------------------------------------------------
# Function
# ---------------------------------------------------------------------------


class Function:
    """A differentiable operation.

    ``forward`` receives the input arrays and returns the output array.
    ``backward`` receives dL/d(output) and returns dL/d(input) per input
    (``None`` for inputs that need no gradient).
    """

    name = "function"

    def __init__(self, *inputs: Tensor) -> None:
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs: Any) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor._wrap(out, requires_grad=track, op=fn if track else None)

    def __repr__(self) -> str:
        return f"<{self.name}>"


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad):
        return grad, grad


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad):
        return grad, -grad


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, grad):
        a, b = (t.data for t in self.inputs)
        return grad * b, grad * a


class Scale(Function):
    name = "scale"

    def forward(self, a, *, factor: float):
        self.factor = factor
        return a * a.dtype.type(factor)

    def backward(self, grad):
        return (grad * grad.dtype.type(self.factor),)


class Sigmoid(Function):
    """Exact logistic 1 / (1 + e^-x), evaluated without overflow."""

    name = "sigmoid"

    def forward(self, a):
        e = np.exp(-np.abs(a))
        self.out = np.where(a >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(a.dtype)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    name = "tanh"

    def forward(self, a):
        self.out = np.tanh(a)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.positive = a > 0
        return np.where(self.positive, a, a.dtype.type(0))

    def backward(self, grad):
        return (np.where(self.positive, grad, grad.dtype.type(0)),)


class Sum(Function):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        (a,) = (t.data for t in self.inputs)
        return (np.full_like(a, grad),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, *, shape: tuple[int, ...]):
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.inputs[0].shape),)


class Permute(Function):
    name = "permute"

    def forward(self, a, *, axes: tuple[int, ...]):
        self.axes = axes
        return np.ascontiguousarray(np.transpose(a, axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(self.axes))),)


class Slice(Function):
    """Contiguous range [start, stop) along one axis."""

    name = "slice"

    def forward(self, a, *, axis: int, start: int, stop: int):
        self.index = (slice(None),) * axis + (slice(start, stop),)
        return a[self.index]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        out[self.index] = grad
        return (out,)


class Select(Function):
    """Single position along one axis; the axis is dropped."""

    name = "select"

    def forward(self, a, *, axis: int, index: int):
        self.index = (slice(None),) * axis + (index,)
        return a[self.index]

    def backward(self, grad):
        out = np.zeros_like(self.inputs[0].data)
        out[self.index] = grad
        return (out,)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return np.split(grad, self.bounds, axis=self.axis)


class Stack(Function):
    name = "stack"

    def forward(self, *arrays, axis: int):
        self.axis = axis
        return np.stack(arrays, axis=axis)

    def backward(self, grad):
        return [np.take(grad, i, axis=self.axis) for i in range(len(self.inputs))]


def _im2col_conv(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-padded same convolution of x [B, C, *S] with w [O, C, *K].

    Returns the output [B, O, *S] and the window view [B, C, *S, *K].
    """
    nd = w.ndim - 2
    pad = [(0, 0), (0, 0)] + [(k // 2, k // 2) for k in w.shape[2:]]
    windows = sliding_window_view(np.pad(x, pad), w.shape[2:], axis=tuple(range(2, 2 + nd)))
    out = np.tensordot(
        windows,
        w,
        axes=((1, *range(2 + nd, 2 + 2 * nd)), (1, *range(2, 2 + nd))),
    )
    return np.moveaxis(out, -1, 1), windows


class ConvSame(Function):
    name = "conv_same"

    def forward(self, x, w, b):
        nd = w.ndim - 2
        out, self.windows = _im2col_conv(x, w)
        out = out + b.reshape((1, -1) + (1,) * nd)
        return np.ascontiguousarray(out, dtype=np.result_type(x, w))

    def backward(self, grad):
        x, w, b = (t.data for t in self.inputs)
        nd = w.ndim - 2
        spatial = tuple(range(2, 2 + nd))
        gb = grad.sum(axis=(0, *spatial))
        gw = np.tensordot(grad, self.windows, axes=((0, *spatial), (0, *spatial)))
        flipped = np.flip(w, axis=spatial).swapaxes(0, 1)
        gx, _ = _im2col_conv(grad, flipped)
        return np.ascontiguousarray(gx), gw, gb


class BatchNormFn(Function):
    """Per-channel affine normalisation with given statistics.

    In training mode the statistics are the batch's own, so the backward pass
    propagates through them; in inference mode they are constants.
    """

    name = "batch_norm"

    def forward(self, x, gamma, beta, *, axis, mean, var, epsilon, training):
        self.axis = axis
        self.training = training
        self.reduce = tuple(i for i in range(x.ndim) if i != axis)
        self.bshape = tuple(-1 if i == axis else 1 for i in range(x.ndim))
        self.inv_std = (1.0 / np.sqrt(var + epsilon)).astype(x.dtype).reshape(self.bshape)
        self.xhat = (x - mean.astype(x.dtype).reshape(self.bshape)) * self.inv_std
        return gamma.reshape(self.bshape) * self.xhat + beta.reshape(self.bshape)

    def backward(self, grad):
        gamma = self.inputs[1].data
        gbeta = grad.sum(axis=self.reduce)
        ggamma = (grad * self.xhat).sum(axis=self.reduce)
        gxhat = grad * gamma.reshape(self.bshape)
        if not self.training:
            return gxhat * self.inv_std, ggamma, gbeta
        n = grad.size // grad.shape[self.axis]
        gx = (self.inv_std / n) * (
            n * gxhat
            - gxhat.sum(axis=self.reduce, keepdims=True)
            - self.xhat * (gxhat * self.xhat).sum(axis=self.reduce, keepdims=True)
        )
        return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------

_ELEMENTWISE: dict[str, type[Function]] = {"add": Add, "sub": Sub, "mul": Mul}
_ACTIVATIONS: dict[str, type[Function]] = {"sigmoid": Sigmoid, "tanh": Tanh, "relu": Relu}


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise add, sub or mul of two equally shaped tensors."""
    if op not in _ELEMENTWISE:
        raise UsageError(f"unknown elementwise op '{op}'")
    _require_same_shape(op, a, b)
    return _ELEMENTWISE[op].apply(a, b)


def activation(op: str, a: Tensor) -> Tensor:
    """Pointwise sigmoid, tanh or relu."""
    if op not in _ACTIVATIONS:
        raise UsageError(f"unknown activation '{op}'")
    return _ACTIVATIONS[op].apply(a)


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}")
    return Reshape.apply(a, shape=tuple(shape))


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"axes {axes} are not a permutation for rank {a.ndim}")
    return Permute.apply(a, axes=tuple(axes))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[axis]:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis of {a.shape[axis]}")
    return Slice.apply(a, axis=axis, start=start, stop=stop)


def select(a: Tensor, axis: int, index: int) -> Tensor:
    if not 0 <= index < a.shape[axis]:
        raise DimensionError(f"index {index} out of range for axis of {a.shape[axis]}")
    return Select.apply(a, axis=axis, index=index)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise DimensionError(f"concat: {t.shape} does not conform to {ref} off axis {axis}")
    return Concat.apply(*tensors, axis=axis)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != ref:
            raise DimensionError(f"stack: shape mismatch {t.shape} vs {ref}")
    return Stack.apply(*tensors, axis=axis)


def _conv_same(x: Tensor, kernels: Tensor, bias: Tensor | None, spatial: int) -> Tensor:
    rank = spatial + 2
    if x.ndim != rank or kernels.ndim != rank:
        raise DimensionError(
            f"conv{spatial}d_same expects rank-{rank} input and kernels, "
            f"got {x.shape} and {kernels.shape}"
        )
    if x.shape[1] != kernels.shape[1]:
        raise DimensionError(
            f"input has {x.shape[1]} channels but kernels expect {kernels.shape[1]}"
        )
    if any(k % 2 == 0 for k in kernels.shape[2:]):
        raise ConfigurationError(f"kernel extents must be odd, got {kernels.shape[2:]}")
    if bias is None:
        bias = Tensor(np.zeros(kernels.shape[0]), dtype=kernels.dtype)
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match {kernels.shape[0]} filters")
    return ConvSame.apply(x, kernels, bias)


def conv2d_same(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """[B, C_in, H, W] * [C_out, C_in, kh, kw] -> [B, C_out, H, W]."""
    return _conv_same(x, kernels, bias, spatial=2)


def conv3d_same(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """[B, C_in, D, H, W] * [C_out, C_in, kd, kh, kw] -> [B, C_out, D, H, W]."""
    return _conv_same(x, kernels, bias, spatial=3)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    *,
    axis: int,
    epsilon: float,
    training: bool,
    moving_mean: np.ndarray | None = None,
    moving_var: np.ndarray | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise ``x`` per channel along ``axis``.

    Returns the output plus the statistics used (biased batch variance in
    training mode, the moving statistics otherwise).
    """
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise DimensionError(f"gamma/beta must have shape ({channels},)")
    reduce = tuple(i for i in range(x.ndim) if i != axis)
    if training:
        if x.size == 0:
            raise UsageError("batch normalisation in training mode needs a non-empty batch")
        mean = x.data.mean(axis=reduce)
        var = x.data.var(axis=reduce)
    else:
        if moving_mean is None or moving_var is None:
            raise UsageError("inference-mode batch normalisation needs moving statistics")
        mean, var = moving_mean, moving_var
    out = BatchNormFn.apply(
        x, gamma, beta, axis=axis, mean=mean, var=var, epsilon=epsilon, training=training,
    )
    return out, mean, var


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    """Every tensor reachable from root, producers before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        if node.op is not None:
            for inp in node.op.inputs:
                if id(inp) not in seen:
                    stack_.append((inp, False))
    return order


class GradGraph:
    """The recorded operations that produced ``output``, in topological order."""

    def __init__(self, output: Tensor) -> None:
        self.output = output
        self.order = _topological_order(output)
        self._reached = {id(t) for t in self.order}

    @property
    def operations(self) -> list[Function]:
        return [t.op for t in self.order if t.op is not None]

    def backward(self) -> dict[Tensor, np.ndarray]:
        """Accumulate d(output)/d(t) into ``t.grad`` for every tracked tensor.

        Gradients of tensors used more than once are summed. Returns the
        gradients of the leaf tensors that require one.
        """
        if self.output.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.output.shape}")
        if not self.output.requires_grad:
            return {}
        pending: dict[int, np.ndarray] = {id(self.output): np.ones_like(self.output.data)}
        for node in reversed(self.order):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            node.grad = grad if node.grad is None else node.grad + grad
            if node.op is None:
                continue
            for inp, g in zip(node.op.inputs, node.op.backward(grad)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                pending[key] = g if key not in pending else pending[key] + g
        return {t: t.grad for t in self.order if t.op is None and t.requires_grad}

    def gradient(self, tensor: Tensor) -> np.ndarray:
        """Gradient of ``tensor`` after backward(); zero if the loss ignores it."""
        if not tensor.requires_grad:
            raise MissingGradientError(f"{tensor!r} does not require a gradient")
        if id(tensor) not in self._reached or tensor.grad is None:
            return np.zeros_like(tensor.data)
        return tensor.grad


# ---------------------------------------------------------------------------
# Verification
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between backward() and central differences.

    error_i = |analytic_i - (f(x+h e_i) - f(x-h e_i)) / 2h| / max(1, |analytic_i|)

    ``x`` is perturbed in place and restored. Run in float64 precision.
    """
    if x.dtype != np.float64:
        raise UsageError("finite_diff_check needs a float64 tensor; use precision('float64')")
    if not x.requires_grad:
        raise UsageError("finite_diff_check needs a tensor with requires_grad=True")
    x.zero_grad()
    graph = GradGraph(f(x))
    graph.backward()
    analytic = graph.gradient(x).reshape(-1).copy()

    flat = x.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = f(x).item()
            flat[i] = original - h
            minus = f(x).item()
            flat[i] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"non-finite evaluation at coordinate {i}")
            numeric = (plus - minus) / (2.0 * h)
            err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
            worst = max(worst, float(err))
    logger.debug("finite_diff_check over %d coordinates: max error %.3e", flat.size, worst)
    return worst
