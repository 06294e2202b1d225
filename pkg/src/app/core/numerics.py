"""
Minimal tensor algebra with tape-based reverse-mode automatic differentiation.

Every differentiable operation records an entry on the current thread's
ComputationTape when at least one of its inputs requires a gradient. Calling
``backward(loss)`` replays the recorded adjoint rules in reverse order.

Arrays are dense row-major numpy arrays. The working precision is float32;
``precision(np.float64)`` switches a thread to float64 for gradient checks.
"""

import logging
import threading
from contextlib import contextmanager
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..exceptions import ContractError, LabelIndexError, NumericError, ShapeError

logger = logging.getLogger(__name__)

# Additive attention mask value; finite so masked rows never produce NaN.
MASK_VALUE = -1e9

_GELU_C = float(np.sqrt(2.0 / np.pi))

_local = threading.local()


def _state():
    if not hasattr(_local, "tape"):
        _local.tape = ComputationTape()
        _local.grad_enabled = True
        _local.dtype = np.float32
    return _local


def get_dtype():
    return _state().dtype


def get_tape() -> "ComputationTape":
    return _state().tape


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextmanager
def precision(dtype):
    """Temporarily change the floating point precision of new tensors."""
    state = _state()
    previous = state.dtype
    state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        state.dtype = previous


@contextmanager
def no_grad():
    """Disable tape recording, e.g. for inference."""
    state = _state()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class TapeEntry:
    __slots__ = ("op", "inputs", "output", "adjoint")

    def __init__(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", adjoint: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.adjoint = adjoint


class ComputationTape:
    """Ordered record of differentiable operations for one thread."""

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, op: str, inputs: Tuple["Tensor", ...], output: "Tensor", adjoint: Callable):
        self.entries.append(TapeEntry(op, inputs, output, adjoint))

    def reset(self):
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


class Tensor:
    """
    Shape-tagged real-valued array taking part in reverse-mode autodiff.

    Leaves are created by user code; outputs of recorded operations are
    interior nodes. Only leaves with ``requires_grad`` accumulate ``grad``.
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.is_leaf = True

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out.is_leaf = not requires_grad
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        raise TypeError("Tensor division is only defined for scalar divisors")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


ArrayLike = Union[Tensor, np.ndarray, float, int]


def as_tensor(value: ArrayLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(op: str, inputs: Sequence[Tensor], data: np.ndarray, adjoint: Callable) -> Tensor:
    requires = is_grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor._result(data, requires)
    if requires:
        get_tape().record(op, tuple(inputs), out, adjoint)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Adjoint rules live at module level so a test can swap one out by name.

def _add_adjoint(g, a_shape, b_shape):
    return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)


def _mul_adjoint(g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _matmul_adjoint(g, a, b):
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _softmax_adjoint(g, y, axis):
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def _log_softmax_adjoint(g, y, axis):
    return g - np.exp(y) * g.sum(axis=axis, keepdims=True)


def _cross_entropy_adjoint(g, probs, onehot, weights, count):
    return (probs - onehot) * (weights[:, None] * (g / count))


def _layer_norm_adjoint(g, xhat, rstd, gain):
    dxhat = g * gain
    n = xhat.shape[-1]
    dx = rstd * (dxhat - dxhat.sum(axis=-1, keepdims=True) / n
                 - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / n)
    return dx, g * xhat, g


def _gelu_adjoint(g, x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner)


def _dropout_adjoint(g, keep):
    return g * keep


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("add", (a, b), a.data + b.data,
                   lambda g: _add_adjoint(g, a.shape, b.shape))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        ga, gb = _add_adjoint(g, a.shape, b.shape)
        return ga, -gb

    return _record("sub", (a, b), a.data - b.data, adjoint)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record("mul", (a, b), a.data * b.data,
                   lambda g: _mul_adjoint(g, a.data, b.data))


def scale(a: Tensor, factor: float) -> Tensor:
    data = a.data * a.data.dtype.type(factor)
    return _record("scale", (a,), data, lambda g: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _record("matmul", (a, b), np.matmul(a.data, b.data),
                   lambda g: _matmul_adjoint(g, a.data, b.data))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record("transpose", (a,), np.transpose(a.data, axes),
                   lambda g: (np.transpose(g, inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _record("reshape", (a,), a.data.reshape(shape),
                   lambda g: (g.reshape(original),))


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def adjoint(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.array(np.broadcast_to(g, shape)),)

    return _record("sum", (a,), np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), adjoint)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tensor_sum(a, axis, keepdims), 1.0 / float(count))


def _check_finite(x: np.ndarray, op: str):
    if np.isnan(x).any():
        raise NumericError(f"{op} received NaN input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted)."""
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    return _record("softmax", (x,), y, lambda g: (_softmax_adjoint(g, y, axis),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    return _record("log_softmax", (x,), y, lambda g: (_log_softmax_adjoint(g, y, axis),))


def cross_entropy(logits: Tensor, target, mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean negative log-likelihood of integer targets.

    Args:
        logits: Tensor of shape [..., n]
        target: Class index, or integer array shaped like logits without the last axis
        mask: Optional boolean array shaped like target; only true positions are averaged

    Returns:
        Scalar tensor
    """
    logits = as_tensor(logits)
    _check_finite(logits.data, "cross_entropy")
    n = logits.shape[-1]
    targets = np.asarray(target, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy target shape {targets.shape} does not match logits {logits.shape}")
    if ((targets < 0) | (targets >= n)).any():
        raise LabelIndexError(f"cross_entropy target out of range [0, {n})")

    flat = logits.data.reshape(-1, n)
    flat_targets = targets.reshape(-1)
    weights = np.ones(flat_targets.shape, dtype=flat.dtype)
    if mask is not None:
        weights = np.asarray(mask, dtype=bool).reshape(-1).astype(flat.dtype)
    count = float(weights.sum())
    if count == 0:
        raise ContractError("cross_entropy mask selects no positions")

    shifted = flat - flat.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(flat.shape[0])
    loss = -(log_probs[rows, flat_targets] * weights).sum() / count

    probs = np.exp(log_probs)
    onehot = np.zeros_like(probs)
    onehot[rows, flat_targets] = 1.0
    shape = logits.shape

    def adjoint(g):
        return (_cross_entropy_adjoint(g, probs, onehot, weights, count).reshape(shape),)

    return _record("cross_entropy", (logits,), np.asarray(loss, dtype=flat.dtype), adjoint)


def layer_norm(x: Tensor, gain: ArrayLike, bias: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * rstd
    out = xhat * gain.data + bias.data

    def adjoint(g):
        dx, dgain, dbias = _layer_norm_adjoint(g, xhat, rstd, gain.data)
        return dx, _unbroadcast(dgain, gain.shape), _unbroadcast(dbias, bias.shape)

    return _record("layer_norm", (x, gain, bias), out.astype(x.data.dtype, copy=False), adjoint)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    out = 0.5 * x.data * (1.0 + np.tanh(inner))
    return _record("gelu", (x,), out, lambda g: (_gelu_adjoint(g, x.data),))


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)

    def adjoint(g):
        grad = np.zeros_like(weight.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _record("embedding", (weight,), weight.data[ids], adjoint)


def select_positions(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick one position per batch row: ``x[b, index[b]]`` for x of shape [B, T, D]."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(x.shape[0])

    def adjoint(g):
        grad = np.zeros_like(x.data)
        grad[rows, index] = g
        return (grad,)

    return _record("select", (x,), x.data[rows, index], adjoint)


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_VALUE) -> Tensor:
    """Replace entries where ``mask`` is true by a constant."""
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, x.data.dtype.type(value), x.data)
    return _record("masked_fill", (x,), out,
                   lambda g: (_unbroadcast(np.where(mask, 0.0, g).astype(g.dtype), x.shape),))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _record("dropout", (x,), x.data * keep, lambda g: (_dropout_adjoint(g, keep),))


def backward(loss: Tensor):
    """
    Populate ``grad`` on every requires-grad leaf reachable from ``loss``.

    Repeated calls without resetting the tape accumulate into existing grads.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        _accumulate(loss, np.ones_like(loss.data))
        return

    tape = get_tape()
    adjoints = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape.entries):
        g = adjoints.pop(id(entry.output), None)
        if g is None:
            continue
        grads = entry.adjoint(g)
        for tensor, grad in zip(entry.inputs, grads):
            if grad is None or not tensor.requires_grad:
                continue
            if tensor.is_leaf:
                _accumulate(tensor, grad)
            else:
                key = id(tensor)
                adjoints[key] = grad if key not in adjoints else adjoints[key] + grad

    for entry in tape.entries:
        for tensor in entry.inputs:
            if tensor.is_leaf and tensor.requires_grad and tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)


def _accumulate(tensor: Tensor, grad: np.ndarray):
    grad = np.asarray(grad, dtype=tensor.data.dtype).reshape(tensor.shape)
    tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad


def randn(shape, std: float, rng: np.random.Generator, requires_grad: bool = True, name: Optional[str] = None) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = True, name: Optional[str] = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad, name=name)


def ones(shape, requires_grad: bool = True, name: Optional[str] = None) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad, name=name)
