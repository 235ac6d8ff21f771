"""Dense float64 tensors with reverse-mode gradients.

Every differentiable computation in aimfuse is composed from the operations
in this module.  Each operation records its parents and a closure that pushes
the upstream gradient back to them; :meth:`Tensor.backward` replays those
closures in reverse topological order.  Gradients accumulate, so call
:func:`zero_grad` between optimisation steps.

Shapes follow numpy broadcasting rules.  Batched inputs simply carry extra
leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

LN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Tensor:
    """A float64 array plus a same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.array(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data)
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=np.float64)
        out.grad = np.zeros_like(out.data)
        out.requires_grad = any(p.requires_grad for p in parents)
        out.op = op
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r})"

    # -- backward -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self.grad += grad
        for node in reversed(order):
            if node._backward is not None:
                node._backward()

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf that participates in gradient computation."""
    return Tensor(data, requires_grad=True, op="param")


def zero_grad(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad[...] = 0.0


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    out = Tensor._result(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.shape)
        out._backward = _backward
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    out = Tensor._result(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad, b.shape)
        out._backward = _backward
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    out = Tensor._result(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.shape)
        out._backward = _backward
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    out = Tensor._result(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _backward():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad / b.data, a.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(out.grad * a.data / (b.data * b.data), b.shape)
        out._backward = _backward
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(-a.data, (a,), "neg")
    if out.requires_grad:
        def _backward():
            a.grad -= out.grad
        out._backward = _backward
    return out


def matmul(a, b) -> Tensor:
    """Matrix product with numpy ``@`` semantics (batched, 1-d promotion)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalars not allowed, got {a.shape} and {b.shape}")
    A = a.data if a.ndim > 1 else a.data[None, :]
    B = b.data if b.ndim > 1 else b.data[:, None]
    if A.shape[-1] != B.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    try:
        full = A @ B
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    data = full
    if a.ndim == 1:
        data = data[..., 0, :]
    if b.ndim == 1:
        data = data[..., 0]
    out = Tensor._result(data, (a, b), "matmul")
    if out.requires_grad:
        def _backward():
            g = out.grad.reshape(full.shape)
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(B, -1, -2), A.shape)
                a.grad += ga.reshape(a.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(A, -1, -2) @ g, B.shape)
                b.grad += gb.reshape(b.shape)
        out._backward = _backward
    return out


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- elementwise unary --------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = Tensor._result(np.where(mask, a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * mask
        out._backward = _backward
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = Tensor._result(y, (a,), "tanh")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * (1.0 - y * y)
        out._backward = _backward
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = np.empty_like(a.data)
    pos = a.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    ez = np.exp(a.data[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor._result(y, (a,), "sigmoid")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * y * (1.0 - y)
        out._backward = _backward
    return out


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    out = Tensor._result(y, (a,), "exp")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * y
        out._backward = _backward
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad / a.data
        out._backward = _backward
    return out


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    out = Tensor._result(np.power(a.data, exponent), (a,), "power")
    if out.requires_grad:
        def _backward():
            if exponent != 0.0:
                a.grad += out.grad * exponent * np.power(a.data, exponent - 1.0)
        out._backward = _backward
    return out


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data >= lo
    out = Tensor._result(np.where(keep, a.data, lo), (a,), "clamp_min")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * keep
        out._backward = _backward
    return out


# -- reductions and normalisers -----------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor._result(y, (a,), "softmax")
    if out.requires_grad:
        def _backward():
            g = out.grad
            a.grad += y * (g - (g * y).sum(axis=axis, keepdims=True))
        out._backward = _backward
    return out


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.shape)
        out._backward = _backward
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Normalise the last axis to zero mean / unit (population) variance, then gain*y + bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape[-1:] != x.shape[-1:] or bias.shape[-1:] != x.shape[-1:]:
        raise ShapeError(f"layer_norm: feature width {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    if eps <= 0:
        raise DomainError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = Tensor._result(gain.data * xhat + bias.data, (x, gain, bias), "layer_norm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if gain.requires_grad:
                gain.grad += _unbroadcast(g * xhat, gain.shape)
            if bias.requires_grad:
                bias.grad += _unbroadcast(g, bias.shape)
            if x.requires_grad:
                gx = g * gain.data
                x.grad += inv * (gx - gx.mean(axis=-1, keepdims=True)
                                 - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        out._backward = _backward
    return out


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, width: int) -> "BatchNormState":
        return cls(np.zeros(width), np.ones(width))


def batch_norm(x, gain, bias, state: BatchNormState, training: bool, eps: float = LN_EPS) -> Tensor:
    """Batch normalisation over axis 0 of an (N, D) input.

    Train mode with N >= 2 uses population batch statistics and moves the
    running statistics by ``state.momentum``.  Inference mode, and train mode
    with a single row, normalise with the running statistics.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects (N, D) input, got {x.shape}")
    n = x.shape[0]
    if n == 0:
        raise DomainError("batch_norm of an empty batch")
    use_batch = training and n >= 2
    if use_batch:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor._result(gain.data * xhat + bias.data, (x, gain, bias), "batch_norm")
    if out.requires_grad:
        def _backward():
            g = out.grad
            if gain.requires_grad:
                gain.grad += _unbroadcast(g * xhat, gain.shape)
            if bias.requires_grad:
                bias.grad += _unbroadcast(g, bias.shape)
            if x.requires_grad:
                gx = g * gain.data
                if use_batch:
                    x.grad += inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
                else:
                    x.grad += gx * inv
        out._backward = _backward
    return out


# -- structural ---------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor._result(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad.reshape(a.shape)
        out._backward = _backward
    return out


def flatten(a, start_axis: int = 0) -> Tensor:
    """Row-major flatten of every axis from ``start_axis`` on."""
    a = as_tensor(a)
    return reshape(a, a.shape[:start_axis] + (-1,))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor._result(np.transpose(a.data, axes), (a,), "transpose")
    if out.requires_grad:
        def _backward():
            a.grad += np.transpose(out.grad, inverse)
        out._backward = _backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    out = Tensor._result(data, tensors, "concat")
    if out.requires_grad:
        bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

        def _backward():
            for t, g in zip(tensors, np.split(out.grad, bounds, axis=axis)):
                if t.requires_grad:
                    t.grad += g
        out._backward = _backward
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    out = Tensor._result(data, tensors, "stack")
    if out.requires_grad:
        def _backward():
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t.grad += np.take(out.grad, i, axis=axis)
        out._backward = _backward
    return out


def index(a, key) -> Tensor:
    """``a[key]`` for basic or integer-array keys."""
    a = as_tensor(a)
    out = Tensor._result(a.data[key], (a,), "index")
    if out.requires_grad:
        def _backward():
            np.add.at(a.grad, key, out.grad)
        out._backward = _backward
    return out


def embedding(table, ids) -> Tensor:
    """Row lookup: ``table[ids]`` with shape ``ids.shape + table.shape[1:]``."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DomainError(f"embedding: ids outside [0, {table.shape[0]})")
    out = Tensor._result(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _backward():
            np.add.at(table.grad, ids, out.grad)
        out._backward = _backward
    return out


def pick(a, ids) -> Tensor:
    """Select one entry per row along the last axis: ``a[..., i, ids[i]]``."""
    a = as_tensor(a)
    ids = np.asarray(ids, dtype=np.int64)
    rows = np.arange(a.shape[0])
    return index(a, (rows, ids))


# -- randomness ---------------------------------------------------------------

@dataclass
class KernelRegistry:
    """Seeded random source plus the train/inference switch.

    Two registries built from the same seed and driven through the same
    operation sequence yield bit-identical results.
    """

    seed: int = 0
    training: bool = True
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)

    def train(self) -> "KernelRegistry":
        self.training = True
        return self

    def eval(self) -> "KernelRegistry":
        self.training = False
        return self


def dropout(a, rate: float, registry: KernelRegistry) -> Tensor:
    """Inverted dropout; the identity in inference mode or at rate 0."""
    a = as_tensor(a)
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    if not registry.training or rate == 0.0:
        return a
    mask = (registry.rng.random(a.shape) >= rate) / (1.0 - rate)
    out = Tensor._result(a.data * mask, (a,), "dropout")
    if out.requires_grad:
        def _backward():
            a.grad += out.grad * mask
        out._backward = _backward
    return out


# -- verification -------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    worst_input: int = -1
    worst_coord: tuple = ()

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    f: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must rebuild its graph from ``inputs`` on every call.  With
    ``max_coords`` set, a seeded sample of that many coordinates per input is
    checked instead of all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise DomainError(f"gradient_check eps must lie in [1e-7, 1e-3], got {eps}")

    def evaluate() -> float:
        value = f()
        if value.size != 1:
            raise ShapeError(f"gradient_check needs a scalar function, got shape {value.shape}")
        v = float(value.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NumericError(f"gradient_check aborted: forward value is {v}")
        return v

    zero_grad(inputs)
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericError(f"gradient_check aborted: forward value is {out.data}")
    out.backward()
    analytic = [t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst, worst_at, checked = 0.0, (-1, ()), 0
    for k, t in enumerate(inputs):
        coords = list(np.ndindex(t.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        for c in coords:
            orig = t.data[c]
            hi, lo = orig + eps, orig - eps
            t.data[c] = hi
            fp = evaluate()
            t.data[c] = lo
            fm = evaluate()
            t.data[c] = orig
            # divide by the step actually taken, not the nominal 2*eps, to cancel representation error
            numeric = (fp - fm) / (hi - lo)
            a = analytic[k][c]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            checked += 1
            if rel > worst:
                worst, worst_at = rel, (k, c)
    zero_grad(inputs)
    return GradCheckReport(worst, checked, worst_at[0], worst_at[1])
