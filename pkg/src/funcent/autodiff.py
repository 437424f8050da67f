"""Reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a backward rule on the resulting
:class:`Tensor`. Backward rules are written with the same Tensor ops, so the
adjoints are themselves differentiable when ``create_graph=True``. That is
what makes ``d/dw ||grad_z f(z; w)||^2`` computable (double backprop).
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Sequence

import numpy as np

_recording = contextvars.ContextVar("funcent_recording", default=True)


class AutodiffError(ValueError):
    """Raised for shape errors, domain errors and non-finite results."""


@contextlib.contextmanager
def no_grad():
    token = _recording.set(False)
    try:
        yield
    finally:
        _recording.reset(token)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise AutodiffError(f"non-finite result in op '{op}'")


class Tensor:
    """A float64 array plus the tape node that produced it."""

    __slots__ = ("data", "requires_grad", "op", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.op = "variable" if requires_grad else "constant"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise AutodiffError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def variable(x, name: str | None = None) -> Tensor:
    return Tensor(x, requires_grad=True, name=name)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    if _recording.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out.op = "constant"
        out._parents = ()
        out._backward = None
    return out


def _broadcast_shapes(op: str, *shapes) -> None:
    try:
        np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise AutodiffError(f"shape mismatch in '{op}': {shapes}") from exc


def sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast adjoint back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and g.shape[lead + i] != 1
    )
    out = tsum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("add", a.shape, b.shape)

    def backward(g):
        return sum_to(g, a.shape), sum_to(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("sub", a.shape, b.shape)

    def backward(g):
        return sum_to(g, a.shape), sum_to(neg(g), b.shape)

    return _node(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("mul", a.shape, b.shape)

    def backward(g):
        return sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape)

    return _node(a.data * b.data, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes("div", a.shape, b.shape)
    if np.any(b.data == 0):
        raise AutodiffError("division by zero in 'div'")
    out_data = a.data / b.data

    def backward(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return sum_to(ga, a.shape), sum_to(gb, b.shape)

    return _node(out_data, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, "neg", (a,), lambda g: (neg(g),))


# elementwise unary ops


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        return (mul(g, out),)

    out = _node(data, "exp", (a,), backward)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise AutodiffError("log of non-positive input")
    return _node(np.log(a.data), "log", (a,), lambda g: (div(g, a),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    mask = (a.data > 0).astype(np.float64)
    return _node(a.data * mask, "relu", (a,), lambda g: (mul(g, mask),))


def square(a) -> Tensor:
    return mul(a, a)


def clamp_min(a, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; the gradient is zero where the floor binds."""
    a = as_tensor(a)
    mask = (a.data > floor).astype(np.float64)
    return _node(np.maximum(a.data, floor), "clamp_min", (a,), lambda g: (mul(g, mask),))


# reductions and shape ops


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept_shape = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def backward(g):
        return (broadcast_to(reshape(g, kept_shape), a.shape),)

    return _node(np.asarray(data), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def norm_squared(a, axis=None, keepdims: bool = False) -> Tensor:
    return tsum(mul(a, a), axis=axis, keepdims=keepdims)


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    _broadcast_shapes("broadcast", a.shape, shape)
    return _node(
        np.broadcast_to(a.data, shape).copy(), "broadcast", (a,), lambda g: (sum_to(g, a.shape),)
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise AutodiffError(f"cannot reshape {a.shape} to {shape}") from exc
    return _node(data, "reshape", (a,), lambda g: (reshape(g, a.shape),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise AutodiffError("transpose expects a matrix")
    return _node(a.data.T.copy(), "transpose", (a,), lambda g: (transpose(g),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"shape mismatch in 'matmul': {a.shape} @ {b.shape}")

    def backward(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    parts = [as_tensor(p) for p in parts]
    if any(p.ndim != 2 for p in parts) or len({p.shape[0] for p in parts}) != 1:
        raise AutodiffError(f"shape mismatch in 'concat': {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(take_cols(g, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _node(np.concatenate([p.data for p in parts], axis=1), "concat", parts, backward)


def take_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    rows, cols = a.shape

    def backward(g):
        pieces = [Tensor(np.zeros((rows, start)))] if start else []
        pieces.append(g)
        if stop < cols:
            pieces.append(Tensor(np.zeros((rows, cols - stop))))
        return (concat_cols(pieces) if len(pieces) > 1 else g,)

    return _node(a.data[:, start:stop].copy(), "slice", (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    """Log-softmax along ``axis``, computed with a max shift."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (sub(g, mul(exp(out), tsum(g, axis=axis, keepdims=True))),)

    out = _node(data, "softmax-logits", (a,), backward)
    return out


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# differentiation


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Sequence[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
) -> list[Tensor]:
    """Adjoints of ``output`` with respect to each tensor in ``wrt``.

    ``output`` must be a scalar unless ``seed`` (the upstream adjoint) is given.
    Inputs that do not influence the output get zero tensors. With
    ``create_graph=True`` the returned adjoints are tape nodes that can be
    differentiated again.
    """
    if seed is None:
        if output.data.shape != ():
            raise AutodiffError(f"gradient needs a scalar output, got shape {output.shape}")
        seed = Tensor(np.ones(()))
    adjoints: dict[int, Tensor] = {}
    if output.requires_grad:
        adjoints[id(output)] = seed
        token = _recording.set(create_graph)
        try:
            for node in reversed(_toposort(output)):
                g = adjoints.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node._parents, node._backward(g)):
                    if not parent.requires_grad or pg is None:
                        continue
                    prev = adjoints.get(id(parent))
                    adjoints[id(parent)] = pg if prev is None else add(prev, pg)
        finally:
            _recording.reset(token)
    result = []
    for w in wrt:
        g = adjoints.get(id(w))
        result.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return result


# functional wrappers over builders

Builder = Callable[..., Tensor]


def eval_forward(builder: Builder, bindings: dict[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``builder(**bindings)`` with every binding as a constant."""
    with no_grad():
        out = builder(**{k: Tensor(v) for k, v in bindings.items()})
    return out.data.copy()


def gradient(
    builder: Builder, bindings: dict[str, np.ndarray], wrt: Iterable[str]
) -> dict[str, np.ndarray]:
    """GradientMap of the scalar ``builder(**bindings)`` for the named variables."""
    wrt = list(wrt)
    missing = [k for k in wrt if k not in bindings]
    if missing:
        raise AutodiffError(f"unbound variable(s): {missing}")
    tensors = {k: Tensor(v, requires_grad=k in wrt, name=k) for k, v in bindings.items()}
    out = builder(**tensors)
    grads = grad(out, [tensors[k] for k in wrt])
    return {k: g.data for k, g in zip(wrt, grads)}


def nested_gradient(
    builder: Builder,
    bindings: dict[str, np.ndarray],
    inner: str,
    outer: str,
    reduce: Callable[[Tensor], Tensor] = norm_squared,
) -> np.ndarray:
    """``d/d outer`` of ``reduce(grad_inner builder)``; defaults to the squared norm."""
    tensors = {
        k: Tensor(v, requires_grad=k in (inner, outer), name=k) for k, v in bindings.items()
    }
    out = builder(**tensors)
    (g_inner,) = grad(out, [tensors[inner]], create_graph=True)
    s = reduce(g_inner)
    (g_outer,) = grad(s, [tensors[outer]])
    return g_outer.data


def check_gradient_fd(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-4,
) -> float:
    """Max relative error between ``analytic`` and central differences of ``fn``.

    The relative error per coordinate is
    ``|a - c| / (|a| + |c| + 1e-12)``. Never raises on a mismatch.
    """
    point = np.asarray(point, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(point.shape)
    worst = 0.0
    flat = point.reshape(-1)
    for j in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[j] += step
        minus[j] -= step
        central = (fn(plus.reshape(point.shape)) - fn(minus.reshape(point.shape))) / (2 * step)
        a = analytic.reshape(-1)[j]
        err = abs(a - central) / (abs(a) + abs(central) + 1e-12)
        worst = max(worst, err)
    return worst
