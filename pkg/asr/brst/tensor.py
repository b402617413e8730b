"""Dense numpy arrays with a recording tape for reverse-mode differentiation.

Every primitive computes its forward value eagerly. When a :class:`Tape` is
active and one of the inputs requires a gradient, the primitive appends a
:class:`TapeEntry` holding the closure that maps the output adjoint to input
adjoints. :func:`backward` replays the entries in reverse order, so a
parameter used by several entries (a block applied S times) receives the sum
of all their contributions.
"""

from __future__ import annotations

import contextvars
import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, EvaluationError, ShapeError

# Finite stand-in for -inf in additive attention masks; exp() underflows to 0.
MASK_VALUE = -1e9

_ids = itertools.count()
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "brst_active_tape", default=None
)

Adjoint = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(value: object, dtype: np.dtype | None = None) -> np.ndarray:
    array = np.asarray(value)
    if dtype is not None:
        return array.astype(dtype, copy=False)
    if array.dtype.kind != "f":
        return array.astype(np.float64)
    return array


class Tensor:
    """An ndarray plus the bookkeeping needed to take part in a tape."""

    __array_priority__ = 100

    def __init__(
        self,
        data: object,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: np.dtype | None = None,
    ) -> None:
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.name = name
        self.id = next(_ids)
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other: object) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: object) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: object) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: object) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: object) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: object) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index: object) -> "Tensor":
        return getitem(self, index)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis, keepdims)


def parameter(data: object, name: str, dtype: np.dtype | None = None) -> Tensor:
    """Leaf tensor that collects gradients."""

    return Tensor(data, requires_grad=True, name=name, dtype=dtype)


def as_tensor(value: object, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


@dataclass
class TapeEntry:
    """One primitive application: inputs, output and the adjoint closure."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    adjoint: Adjoint


@dataclass
class Tape:
    """Ordered record of primitive applications, in evaluation (topological) order."""

    entries: list[TapeEntry] = field(default_factory=list)
    _tokens: list[contextvars.Token] = field(default_factory=list, repr=False)

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc_info: object) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [entry.op for entry in self.entries]


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, e.g. for decoding and analysis."""

    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


def record(
    op: str, inputs: Sequence[Tensor], data: np.ndarray, adjoint: Adjoint
) -> Tensor:
    """Wrap a forward value and, when differentiable, log it on the active tape.

    Custom primitives (such as the CTC loss) use this to join the tape.
    """

    out = Tensor(data, dtype=data.dtype)
    out.is_leaf = False
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append(TapeEntry(op, tuple(inputs), out, adjoint))
    return out


def backward(
    tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None
) -> dict[Tensor, np.ndarray]:
    """Reverse-mode adjoints of a scalar loss with respect to leaf tensors.

    Returns a mapping from every reached leaf to its gradient. Leaves listed in
    ``params`` but not reached by the loss get zero gradients.
    """

    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if loss.is_leaf and loss.requires_grad:
        leaves[loss.id] = loss
    for entry in reversed(tape.entries):
        grad = adjoints.pop(entry.output.id, None)
        if grad is None:
            continue
        for tensor, tensor_grad in zip(entry.inputs, entry.adjoint(grad)):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            previous = adjoints.get(tensor.id)
            adjoints[tensor.id] = tensor_grad if previous is None else previous + tensor_grad
            if tensor.is_leaf:
                leaves[tensor.id] = tensor
    grads = {leaf: np.asarray(adjoints[key]) for key, leaf in leaves.items()}
    for param in params or ():
        if param not in grads:
            grads[param] = np.zeros_like(param.data)
    return grads


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# Elementwise ----------------------------------------------------------------


def add(a: object, b: object) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return record(
        "add",
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: object, b: object) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return record(
        "sub",
        (a, b),
        data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: object, b: object) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    return record(
        "mul",
        (a, b),
        data,
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def _pair(a: object, b: object) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return record("exp", (x,), data, lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    return record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at 0 is taken as 0."""

    mask = x.data > 0
    return record("relu", (x,), np.where(mask, x.data, 0.0).astype(x.dtype), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when the rate is 0 or no generator is given."""

    if rate <= 0.0 or rng is None:
        return x
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
    return record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# Linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., m, k) @ (..., k, n) with broadcast batch extents."""

    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner extents differ: {a.shape} @ {b.shape}"
        )
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} with {b.shape}") from exc

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = np.matmul(g, np.swapaxes(b.data, -1, -2))
        grad_b = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return record("matmul", (a, b), data, adjoint)


# Reductions and shape ----------------------------------------------------------


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(a % ndim for a in axes)


def sum_(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    data = np.sum(x.data, axis=axes, keepdims=keepdims)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return record("sum", (x,), np.asarray(data), adjoint)


def mean(x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = math.prod(x.shape[a] for a in axes)
    return sum_(x, axes, keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from exc
    return record("reshape", (x,), data, lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return record("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inverse),))


def getitem(x: Tensor, index: object) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back with np.add.at."""

    data = x.data[index]

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return record("getitem", (x,), np.array(data, copy=True), adjoint)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return record(
        "concat",
        tuple(tensors),
        data,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


# Normalizations ------------------------------------------------------------


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted log-softmax."""

    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    data = shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (g - np.exp(data) * np.sum(g, axis=axis, keepdims=True),)

    return record("log_softmax", (x,), data, adjoint)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    data = shifted / np.sum(shifted, axis=axis, keepdims=True)

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        return (data * (g - np.sum(g * data, axis=axis, keepdims=True)),)

    return record("softmax", (x,), data, adjoint)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""

    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last extent {width}"
        )
    centered = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + eps)
    normalized = centered * inv_std
    data = normalized * gain.data + bias.data

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        grad_norm = g * gain.data
        grad_x = inv_std * (
            grad_norm
            - np.mean(grad_norm, axis=-1, keepdims=True)
            - normalized * np.mean(grad_norm * normalized, axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        grad_gain = np.sum(flat_g * normalized.reshape(-1, width), axis=0)
        grad_bias = np.sum(flat_g, axis=0)
        return grad_x, grad_gain, grad_bias

    return record("layer_norm", (x, gain, bias), data, adjoint)


# Lookups and convolutions ------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Rows of ``weight`` selected by integer ``ids`` (any shape)."""

    ids = np.asarray(ids, dtype=np.int64)
    data = weight.data[ids]

    def adjoint(g: np.ndarray) -> tuple[np.ndarray]:
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (grad,)

    return record("embedding", (weight,), data, adjoint)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Unpadded 2-D convolution: (B, C, H, W) * (O, C, kh, kw) -> (B, O, Ho, Wo)."""

    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {weight.shape}")
    batch, channels, height, width = x.shape
    out_channels, _, kh, kw = weight.shape
    if height < kh or width < kw:
        raise ShapeError(f"conv2d: input {x.shape} is smaller than kernel {weight.shape}")
    windows = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_h, out_w = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * kh * kw)
    flat_w = weight.data.reshape(out_channels, -1)
    data = (cols @ flat_w.T + bias.data).reshape(batch, out_h, out_w, out_channels)
    data = np.ascontiguousarray(data.transpose(0, 3, 1, 2))

    def adjoint(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        flat_g = g.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        grad_w = (flat_g.T @ cols).reshape(weight.shape)
        grad_b = flat_g.sum(axis=0)
        grad_cols = (flat_g @ flat_w).reshape(batch, out_h, out_w, channels, kh, kw)
        grad_x = np.zeros_like(x.data)
        for i in range(kh):
            for j in range(kw):
                grad_x[:, :, i : i + stride * out_h : stride, j : j + stride * out_w : stride] += (
                    grad_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                )
        return grad_x, grad_w, grad_b

    return record("conv2d", (x, weight, bias), data, adjoint)


# Named parameters ------------------------------------------------------------


class ParamStore(Mapping[str, Tensor]):
    """Dotted parameter names mapped to leaf tensors, in insertion order."""

    def __init__(self, tensors: dict[str, Tensor] | None = None) -> None:
        self._tensors: dict[str, Tensor] = dict(tensors or {})

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def add(self, name: str, data: np.ndarray, dtype: np.dtype | None = None) -> Tensor:
        if name in self._tensors:
            raise ContractError(f"parameter {name!r} already registered")
        tensor = parameter(data, name, dtype)
        self._tensors[name] = tensor
        return tensor

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: tensor.data for name, tensor in self._tensors.items()}

    def clone(self) -> "ParamStore":
        return ParamStore(
            {name: parameter(t.data.copy(), name) for name, t in self._tensors.items()}
        )

    def num_elements(self, prefix: str = "") -> int:
        return sum(t.data.size for name, t in self._tensors.items() if name.startswith(prefix))

    def allclose(self, other: "ParamStore", atol: float = 0.0) -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[name].shape == other[name].shape
            and np.allclose(self[name].data, other[name].data, rtol=0.0, atol=atol)
            for name in self
        )


# Gradient verification -----------------------------------------------------------


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` rebuilds a scalar from the current values of ``params``; the check
    perturbs every entry in place and restores it afterwards. The error of an
    entry is |analytic - numeric| / max(1, |numeric|).
    """

    if h <= 0:
        raise ContractError(f"finite_diff_check needs h > 0, got {h}")
    with Tape() as tape:
        loss = f()
    grads = backward(tape, loss, params)

    def evaluate() -> float:
        with no_grad():
            value = float(np.asarray(f().data).reshape(-1)[0])
        if not math.isfinite(value):
            raise EvaluationError(f"function value is not finite: {value}")
        return value

    worst = 0.0
    for param in params:
        if not param.data.flags.c_contiguous:
            param.data = np.ascontiguousarray(param.data)
        flat = param.data.reshape(-1)
        analytic = grads[param].reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            upper = evaluate()
            flat[i] = original - h
            lower = evaluate()
            flat[i] = original
            numeric = (upper - lower) / (2.0 * h)
            error = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    return worst


__all__ = [
    "MASK_VALUE",
    "Tensor",
    "Tape",
    "TapeEntry",
    "parameter",
    "as_tensor",
    "no_grad",
    "record",
    "backward",
    "add",
    "sub",
    "mul",
    "exp",
    "log",
    "relu",
    "dropout",
    "matmul",
    "sum_",
    "mean",
    "reshape",
    "transpose",
    "getitem",
    "concat",
    "log_softmax",
    "softmax",
    "layer_norm",
    "embedding",
    "conv2d",
    "ParamStore",
    "finite_diff_check",
]
