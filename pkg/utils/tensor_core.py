"""
Dense float64 tensors with reverse-mode differentiation.

Every op computes its forward values with numpy and, when any input requires a
gradient, records its parents and a local gradient rule on the output. Calling
`backward` on a scalar walks that tape in reverse topological order.
"""

import math
from typing import Callable, Sequence

import numpy as np
from scipy import special

from utils.errors import DomainError, NumericalError

# Debug switch: raise as soon as any op produces NaN/Inf.
CHECK_FINITE = False

LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)
SOFTPLUS_LINEAR_ABOVE = 30.0

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tensor:
    """A float64 array that may sit on the differentiation tape."""

    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_backward")
    # numpy arrays on the left hand operators over to the reflected methods
    __array_ufunc__ = None

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        backward_fn: BackwardFn | None = None,
        op: str = "leaf",
    ):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = op
        self._parents = parents
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.size != 1:
            raise DomainError(f"item() needs a single value, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return take(self, index)


def parameter(values) -> Tensor:
    """A leaf tensor that collects gradients."""
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn, op: str) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite output from op '{op}'")
    if any(p.requires_grad for p in parents):
        return Tensor(values, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(values, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast to reach `grad.shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DomainError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# Elementwise binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.values * b.values,
        (a, b),
        lambda g: (_unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    return _make(
        a.values / b.values,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.values, a.shape),
            _unbroadcast(-g * a.values / b.values**2, b.shape),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DomainError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as e:
        raise DomainError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward_fn(g):
        grad_a = g @ np.swapaxes(b.values, -1, -2)
        grad_b = np.swapaxes(a.values, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _make(a.values @ b.values, (a, b), backward_fn, "matmul")


def maximum(x, const) -> Tensor:
    """Elementwise max against a constant; ties route the gradient to the constant."""
    x = as_tensor(x)
    c = np.asarray(const.values if isinstance(const, Tensor) else const, dtype=np.float64)
    try:
        fits = np.broadcast_shapes(x.shape, c.shape) == x.shape
    except ValueError:
        fits = False
    if not fits:
        raise DomainError(f"maximum: constant of shape {c.shape} does not fit {x.shape}")
    active = x.values > c
    return _make(np.maximum(x.values, c), (x,), lambda g: (g * active,), "maximum")


# Elementwise unary ops

def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = special.expit(x.values)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.values)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    active = x.values > 0
    return _make(np.where(active, x.values, 0.0), (x,), lambda g: (g * active,), "relu")


def softplus(x) -> Tensor:
    x = as_tensor(x)
    v = x.values
    out = np.where(
        v > SOFTPLUS_LINEAR_ABOVE,
        v,
        np.log1p(np.exp(np.minimum(v, SOFTPLUS_LINEAR_ABOVE))),
    )
    return _make(out, (x,), lambda g: (g * special.expit(v),), "softplus")


def exp(x) -> Tensor:
    x = as_tensor(x)
    e = np.exp(x.values)
    return _make(e, (x,), lambda g: (g * e,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.values)
    return _make(out, (x,), lambda g: (g / x.values,), "log")


def normal_cdf(z) -> Tensor:
    """Standard normal CDF through erf."""
    z = as_tensor(z)
    out = 0.5 * (1.0 + special.erf(z.values / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * z.values**2 - LOG_SQRT_2PI)
    return _make(out, (z,), lambda g: (g * pdf,), "normal_cdf")


def log_normal_cdf(z) -> Tensor:
    """log Φ(z), stable far into the lower tail (erfc based)."""
    z = as_tensor(z)
    out = special.log_ndtr(z.values)
    # d/dz log Φ = φ/Φ, formed in log space to survive the tail
    ratio = np.exp(-0.5 * z.values**2 - LOG_SQRT_2PI - out)
    return _make(out, (z,), lambda g: (g * ratio,), "log_normal_cdf")


# Reductions and shape ops

def sum(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.values, axis=axis, keepdims=keepdims), (x,), backward_fn, "sum")


def mean(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return div(sum(x, axis=axis, keepdims=keepdims), float(count))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError as e:
        shapes = " and ".join(str(t.shape) for t in tensors)
        raise DomainError(f"concat: incompatible shapes {shapes}") from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def take(x, index) -> Tensor:
    """Basic or fancy indexing, i.e. slicing."""
    x = as_tensor(x)

    items = index if isinstance(index, tuple) else (index,)
    basic = all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)

    def backward_fn(g):
        full = np.zeros_like(x.values)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.values[index], (x,), backward_fn, "slice")


def reshape(x, shape: tuple[int, ...]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.values.reshape(shape)
    except ValueError as e:
        raise DomainError(f"reshape: cannot view {x.shape} as {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


# Gaussian helpers used by the likelihood losses

def _standardize(y, mu, sigma) -> Tensor:
    sigma = as_tensor(sigma)
    if np.any(sigma.values <= 0):
        raise DomainError("sigma must be strictly positive")
    return div(sub(y, mu), sigma)


def gaussian_log_pdf(y, mu, sigma) -> Tensor:
    z = _standardize(y, mu, sigma)
    return sub(mul(-0.5, mul(z, z)), add(log(sigma), LOG_SQRT_2PI))


def gaussian_pdf(y, mu, sigma) -> Tensor:
    return exp(gaussian_log_pdf(y, mu, sigma))


def gaussian_cdf(y, mu, sigma) -> Tensor:
    return normal_cdf(_standardize(y, mu, sigma))


def log_survival(y, mu, sigma) -> Tensor:
    """log(1 - Φ((y - mu) / sigma)) without forming 1 - Φ."""
    return log_normal_cdf(neg(_standardize(y, mu, sigma)))


# Differentiation

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Sequence[Tensor] | None = None) -> list[np.ndarray]:
    """
    Accumulate dLoss/dLeaf into `.grad` of every leaf on the tape.

    Returns gradients for `params` in order, zeros for parameters the loss
    does not depend on.
    """
    if loss.size != 1:
        raise DomainError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, parent_grad in zip(node._parents, node._backward(g)):
            if parent.requires_grad and parent_grad is not None:
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    if params is None:
        return []
    return [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
