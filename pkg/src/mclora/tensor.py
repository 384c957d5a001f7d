"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation records a
:class:`GraphNode` holding its parents and a closure that maps the upstream
gradient to one gradient per parent. :meth:`Tensor.backward` walks the graph in
reverse topological order and accumulates into ``grad`` of every leaf that
requires gradients.

Broadcasting is limited to scalar-with-tensor; the few places that need a row
vector added to every row use :func:`add_bias`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import special
from .errors import ContractError, DimensionError, DomainError, NotPositiveDefiniteError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class GraphNode:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.op = op
        self.parents = parents
        self.backward = backward

    def __repr__(self):
        return f"GraphNode({self.op}, {len(self.parents)} parents)"


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "node", "name")
    # Makes ``ndarray * Tensor`` defer to Tensor.__rmul__.
    __array_priority__ = 1000

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.array(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node = None
        self.name = name

    @classmethod
    def _from_op(cls, values: np.ndarray, op: str, parents: tuple, backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.name = None
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out.node = GraphNode(op, parents, backward)
        else:
            out.requires_grad = False
            out.node = None
        return out

    # -- basic properties -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else _not_scalar(self)

    def __float__(self):
        return self.item()

    def __len__(self):
        return len(self.values)

    def __repr__(self):
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.values, precision=6)}{grad})"

    def detach(self) -> "Tensor":
        return Tensor._from_values(self.values)

    @classmethod
    def _from_values(cls, values: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.requires_grad = False
        out.node = None
        out.name = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- differentiation --------------------------------------------------

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self.values.size != 1:
            raise ContractError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        grads = {id(self): np.ones_like(self.values) if seed is None else np.asarray(seed, dtype=np.float64)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            for parent, pg in zip(t.node.parents, t.node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sqrt(self):
        return sqrt(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list:
    order: list = []
    visited: set = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._from_values(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return Tensor(x)


def parameter(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# -- elementwise binary ops ----------------------------------------------------


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.values + b.values, "add", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._from_op(
        a.values - b.values, "sub", (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    av, bv = a.values, b.values
    return Tensor._from_op(
        av * bv, "mul", (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    av, bv = a.values, b.values
    out = av / bv
    return Tensor._from_op(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return Tensor._from_op(a.values * factor, "scale", (a,), lambda g: (g * factor,))


def add_bias(x, b) -> Tensor:
    """Add a length-n vector to every row of an (m, n) matrix."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: cannot add {b.shape} to rows of {x.shape}")
    return Tensor._from_op(x.values + b.values, "add_bias", (x, b), lambda g: (g, g.sum(axis=0)))


# -- elementwise unary ops -----------------------------------------------------


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.values, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    if np.any(~(av > 0)):
        raise DomainError(f"log of non-positive value (min {np.min(av)!r})")
    return Tensor._from_op(np.log(av), "log", (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.values < 0):
        raise DomainError(f"sqrt of negative value (min {np.min(a.values)!r})")
    out = np.sqrt(a.values)
    return Tensor._from_op(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    k = float(exponent)
    av = a.values
    if k == 2.0:
        return Tensor._from_op(av * av, "square", (a,), lambda g: (2.0 * g * av,))
    return Tensor._from_op(av**k, "pow", (a,), lambda g: (g * k * av ** (k - 1.0),))


def square(a) -> Tensor:
    return power(a, 2.0)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return Tensor._from_op(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.values > 0
    return Tensor._from_op(np.where(mask, a.values, 0.0), "relu", (a,), lambda g: (g * mask,))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus_values(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inverse_softplus(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise DomainError("inverse_softplus requires positive values")
    # log(expm1(y)) computed stably for large y.
    return y + np.log(-np.expm1(-y))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return Tensor._from_op(softplus_values(av), "softplus", (a,), lambda g: (g * sigmoid_values(av),))


def lgamma(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return Tensor._from_op(
        np.asarray(special.lgamma(av)), "lgamma", (a,), lambda g: (g * special.digamma(av),)
    )


def digamma(a) -> Tensor:
    a = as_tensor(a)
    av = a.values
    return Tensor._from_op(
        np.asarray(special.digamma(av)), "digamma", (a,), lambda g: (g * special.trigamma(av),)
    )


# -- reductions and shape ops --------------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return Tensor._from_op(a.values.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(
        np.transpose(a.values, axes), "transpose", (a,), lambda g: (np.transpose(g, inverse),)
    )


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.asarray(a.values[index]), "getitem", (a,), backward)


def stack(tensors: Sequence) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mixed shapes {sorted(shapes)}")
    return Tensor._from_op(
        np.stack([t.values for t in tensors]), "stack", tensors, lambda g: tuple(g[i] for i in range(len(g)))
    )


def diag(v) -> Tensor:
    """Vector to diagonal matrix."""
    v = as_tensor(v)
    if v.ndim != 1:
        raise DimensionError(f"diag expects a vector, got shape {v.shape}")
    return Tensor._from_op(np.diag(v.values), "diag", (v,), lambda g: (np.diagonal(g).copy(),))


def diagonal(m) -> Tensor:
    """Main diagonal of a square matrix."""
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"diagonal expects a square matrix, got shape {m.shape}")
    return Tensor._from_op(np.diagonal(m.values).copy(), "diagonal", (m,), lambda g: (np.diag(g),))


def trace(m) -> Tensor:
    return tsum(diagonal(m))


# -- linear algebra ------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product of (m, k) by (k, n); stacks of matrices with equal batch shape also work."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def backward(g):
        return (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)

    return Tensor._from_op(av @ bv, "matmul", (a, b), backward)


def cholesky_values(s: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix (numpy arrays)."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise DimensionError(f"cholesky expects a square matrix, got shape {s.shape}")
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    # Redo the factorization by hand to locate the failing pivot.
    n = s.shape[0]
    lower = np.zeros_like(s)
    for j in range(n):
        pivot = s[j, j] - lower[j, :j] @ lower[j, :j]
        if not pivot > 0:
            raise NotPositiveDefiniteError(j, float(pivot))
        lower[j, j] = np.sqrt(pivot)
        lower[j + 1 :, j] = (s[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    raise NotPositiveDefiniteError(-1, float("nan"))


def cholesky(a) -> Tensor:
    """Differentiable lower Cholesky factor; reads only the lower triangle of ``a``."""
    a = as_tensor(a)
    lower = cholesky_values(a.values)

    def backward(g):
        phi = lower.T @ np.tril(g)
        phi[np.diag_indices_from(phi)] *= 0.5
        phi = np.tril(phi)
        # L^{-T} phi L^{-1}
        tmp = solve_triangular(lower, phi.T, lower=True, trans=1).T
        grad = solve_triangular(lower, tmp, lower=True, trans=1)
        return (0.5 * (grad + grad.T),)

    return Tensor._from_op(lower, "cholesky", (a,), backward)


def logdet_spd(a) -> Tensor:
    """log|A| of an SPD matrix, via twice the log of the Cholesky diagonal."""
    return scale(tsum(log(diagonal(cholesky(a)))), 2.0)


# -- softmax family --------------------------------------------------------------


def _softmax_values(x: np.ndarray, axis: int) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    s = _softmax_values(a.values, axis)
    return Tensor._from_op(
        s, "softmax", (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.values
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    out = x - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, "log_softmax", (a,), backward)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    labels = labels.astype(np.intp)
    x = logits.values
    m = x.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=1, keepdims=True))
    logp = x - lse
    rows = np.arange(x.shape[0])
    batch = x.shape[0]
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return Tensor._from_op(np.asarray(loss), "softmax_xent", (logits,), backward)


# -- finite differences ------------------------------------------------------------


def finite_diff_grad(f: Callable, x, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    x0 = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = x0.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(_scalar(f(Tensor(x0))))
            flat[i] = orig - h
            fm = float(_scalar(f(Tensor(x0))))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return grad


def _scalar(v):
    if isinstance(v, Tensor):
        return v.item()
    return float(np.asarray(v).reshape(-1)[0])


def value_and_grad(f: Callable, x) -> tuple[float, np.ndarray]:
    """Evaluate f at x and return (f(x), df/dx) through reverse mode."""
    t = Tensor(x.values if isinstance(x, Tensor) else x, requires_grad=True)
    out = f(t)
    out.backward()
    grad = t.grad if t.grad is not None else np.zeros_like(t.values)
    return out.item(), grad
