"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records its parents and a closure computing the parents'
adjoints from the output adjoint. :func:`backward` orders the recorded graph
topologically and replays the closures in reverse. Nothing is global: a graph
lives as long as its output tensor, so independent graphs may be built and
differentiated on different threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A dense array that can take part in gradient computation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation over ``parents``.

    ``backward_fn`` maps the output adjoint to one adjoint (or None) per parent.
    The node is only recorded when some parent requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


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


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return make_node(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p < 1 and np.any(a.data <= 0):
        raise DomainError(f"power {p} of non-positive value")
    ad = a.data
    return make_node(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return make_node(ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    ad = a.data
    return make_node(np.log(ad), (a,), lambda g: (g / ad,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch a named elementwise operation (``add``, ``relu``, ``scale`` ...)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; expected one of {sorted(_ELEMENTWISE)}") from None
    return fn(*args)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true, else ``b``. ``mask`` is a constant."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    shape = np.broadcast_shapes(mask.shape, a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (
            _unbroadcast(np.where(mask, g, 0.0), sa) if a.requires_grad else None,
            _unbroadcast(np.where(mask, 0.0, g), sb) if b.requires_grad else None,
        )

    if np.where(mask, a.data, b.data).shape != shape:
        raise DimensionError(f"where: shapes {mask.shape}, {sa}, {sb} are not compatible")
    return make_node(np.where(mask, a.data, b.data), (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make_node(out, (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.T, (a,), lambda g: (g.T,))


def take(a, index) -> Tensor:
    """Index like numpy; advanced indices scatter-add in the backward pass."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return make_node(a.data[index], (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in tensors]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_node(out, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"stack: shapes {[t.shape for t in tensors]}") from None

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return make_node(out, tensors, backward)


# ---------------------------------------------------------------------------
# probabilities and losses


def _stable_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.size == 0:
        raise ContractError("softmax of an empty tensor")
    p = _stable_softmax(logits.data, axis)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return make_node(p, (logits,), backward)


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (logits,), backward)


def _check_targets(targets, n: int) -> np.ndarray:
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise ContractError("class targets must be integers")
    if np.any(t < 0) or np.any(t >= n):
        raise IndexError(f"target class out of range [0, {n})")
    return t


def cross_entropy(probabilities, target) -> Tensor:
    """Negative log-probability of ``target``; rows are averaged for a batch."""
    probabilities = as_tensor(probabilities)
    if probabilities.ndim == 1:
        t = int(_check_targets(target, probabilities.shape[0]))
        return scale(log(take(probabilities, t)), -1.0)
    t = _check_targets(target, probabilities.shape[-1])
    picked = take(probabilities, (np.arange(probabilities.shape[0]), t))
    return scale(tsum(log(picked)), -1.0 / probabilities.shape[0])


def softmax_cross_entropy(logits, targets, weights=None) -> Tensor:
    """Fused softmax + cross-entropy over the rows of ``logits``.

    Returns the mean loss, or ``sum_i weights[i] * loss_i`` when weights are
    given. Weights are constants.
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    x = logits.data[None, :] if single else logits.data
    n, c = x.shape
    t = _check_targets(np.atleast_1d(targets), c)
    if t.shape != (n,):
        raise DimensionError(f"softmax_cross_entropy: {n} rows but {t.shape} targets")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64)
    z = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    losses = lse - z[np.arange(n), t]
    p = np.exp(z - lse[:, None])

    def backward(g):
        d = p.copy()
        d[np.arange(n), t] -= 1.0
        d *= (g * w)[:, None]
        return (d[0] if single else d,)

    return make_node(np.dot(w, losses), (logits,), backward)


def per_sample_cross_entropy(logits: np.ndarray, targets) -> np.ndarray:
    """Cross-entropy of each row (plain arrays, no graph)."""
    x = np.asarray(logits, dtype=np.float64)
    t = _check_targets(targets, x.shape[1])
    z = x - x.max(axis=1, keepdims=True)
    return np.log(np.exp(z).sum(axis=1)) - z[np.arange(x.shape[0]), t]


def frobenius_norm(a) -> Tensor:
    """Frobenius norm with the zero subgradient at the origin."""
    a = as_tensor(a)
    nrm = float(np.sqrt(np.sum(a.data * a.data)))
    ad = a.data

    def backward(g):
        if nrm == 0.0:
            return (np.zeros_like(ad),)
        return (g * ad / nrm,)

    return make_node(np.array(nrm), (a,), backward)


# ---------------------------------------------------------------------------
# differentiation


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor, inputs: Iterable[Tensor] = ()) -> None:
    """Fill ``.grad`` of every leaf reachable from the scalar ``loss``.

    Gradients are overwritten, not accumulated across calls. Leaves listed in
    ``inputs`` that do not influence ``loss`` receive a zero gradient.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    inputs = list(inputs)
    for leaf in inputs:
        leaf.grad = np.zeros_like(leaf.data)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
        node.grad = None
    for node in order:
        if node.is_leaf and node.grad is None:
            node.grad = np.zeros_like(node.data)


@dataclass
class GradCheckReport:
    passed: bool
    worst_error: float
    tolerance: float
    errors: list[float] = field(default_factory=list)
    failures: list[int] = field(default_factory=list)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} worst relative error {self.worst_error:.3e} (tolerance {self.tolerance:g})"


def _relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    # gradients below ``floor`` cannot be told apart from finite-difference rounding noise
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` with central differences.

    ``fn`` takes one tensor per entry of ``point`` and returns a scalar
    tensor. The error per input is ``|g_rev - g_num| / max(|g_rev|, |g_num|)``
    in the Euclidean norm. Gradients whose norm is within the rounding noise
    of the differences (about ``100 * eps * max(1, |f|) / step`` per entry)
    count as zero, so an exactly vanishing gradient is not reported as a
    100% error.
    """
    leaves = [Tensor(p, requires_grad=True) for p in point]
    return grad_check_tensors(lambda: fn(*leaves), leaves, tolerance, step)


def grad_check_tensors(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Like :func:`grad_check`, but perturbs existing tensors (e.g. module parameters) in place."""
    out = fn()
    backward(out, tensors)
    analytic = [t.grad.copy() for t in tensors]
    # rounding error of one central difference is about eps * |f| / step per entry
    noise = np.finfo(np.float64).eps * max(1.0, abs(out.item())) / step
    errors = []
    for t, g in zip(tensors, analytic):
        numeric = np.zeros(t.data.size)
        flat = t.data.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = fn().item()
            flat[idx] = orig - step
            lo = fn().item()
            flat[idx] = orig
            numeric[idx] = (hi - lo) / (2.0 * step)
        errors.append(_relative_error(g, numeric.reshape(t.shape), 100.0 * noise * math.sqrt(t.data.size)))
    worst = max(errors) if errors else 0.0
    failures = [i for i, e in enumerate(errors) if not e < tolerance]
    return GradCheckReport(not failures, worst, tolerance, errors, failures)
