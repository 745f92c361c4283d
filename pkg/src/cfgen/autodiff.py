"""Reverse-mode automatic differentiation on float64 numpy arrays.

A small tape: every op returns a `Var` holding the forward value and a
vector-Jacobian closure. `backward` walks the graph once in reverse
topological order. The primitive set is deliberately minimal: affine maps,
relu/gelu/sigmoid, exp/log/square/sqrt, elementwise arithmetic with numpy
broadcasting, sum/mean reductions, concat/slice on the last axis.
"""

from __future__ import annotations

import numpy as np

_SIGMOID_CLAMP = 1e-7


class Var:
    """Node in the computation graph. `value` is always a float64 ndarray."""

    __slots__ = ("value", "grad", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.vjps = vjps

    @property
    def shape(self):
        return self.value.shape

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
        return mul(self, -1.0)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value + b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(g, b.value.shape)),
    )


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value - b.value,
        (a, b),
        (lambda g: _unbroadcast(g, a.value.shape), lambda g: _unbroadcast(-g, b.value.shape)),
    )


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value * b.value,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    inv = 1.0 / b.value
    return Var(
        a.value * inv,
        (a, b),
        (
            lambda g: _unbroadcast(g * inv, a.value.shape),
            lambda g: _unbroadcast(-g * a.value * inv * inv, b.value.shape),
        ),
    )


def affine(x, w, b) -> Var:
    """x @ w + b with x (n, p), w (p, q), b (q,)."""
    x, w, b = as_var(x), as_var(w), as_var(b)
    return Var(
        x.value @ w.value + b.value,
        (x, w, b),
        (
            lambda g: g @ w.value.T,
            lambda g: x.value.T @ g,
            lambda g: g.sum(axis=0) if g.ndim > 1 else g,
        ),
    )


def matmul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    return Var(
        a.value @ b.value,
        (a, b),
        (lambda g: g @ b.value.T, lambda g: a.value.T @ g),
    )


def relu(x) -> Var:
    x = as_var(x)
    mask = x.value > 0
    return Var(np.where(mask, x.value, 0.0), (x,), (lambda g: g * mask,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x) -> Var:
    """Tanh-form gelu; the derivative is of the same closed form."""
    x = as_var(x)
    v = x.value
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)
    # d/dv [0.5 v (1 + tanh(u))] = 0.5 (1 + t) + 0.5 v (1 - t^2) u'
    du = _GELU_C * (1.0 + 3 * 0.044715 * v**2)
    deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * du
    return Var(out, (x,), (lambda g: g * deriv,))


def sigmoid(x, clamp: bool = False) -> Var:
    """Logistic function; with `clamp`, output is clipped to
    [1e-7, 1 - 1e-7] for use as a probability (zero gradient where clipped)."""
    x = as_var(x)
    v = x.value
    # stable two-branch evaluation
    pos = v >= 0
    s = np.where(pos, 1.0 / (1.0 + np.exp(-np.where(pos, v, 0.0))), 0.0)
    ev = np.exp(np.where(pos, 0.0, v))
    s = np.where(pos, s, ev / (1.0 + ev))
    if clamp:
        inside = (s > _SIGMOID_CLAMP) & (s < 1.0 - _SIGMOID_CLAMP)
        out = np.clip(s, _SIGMOID_CLAMP, 1.0 - _SIGMOID_CLAMP)
        deriv = np.where(inside, s * (1.0 - s), 0.0)
        return Var(out, (x,), (lambda g: g * deriv,))
    deriv = s * (1.0 - s)
    return Var(s, (x,), (lambda g: g * deriv,))


def exp(x) -> Var:
    x = as_var(x)
    e = np.exp(x.value)
    return Var(e, (x,), (lambda g: g * e,))


def log(x) -> Var:
    x = as_var(x)
    return Var(np.log(x.value), (x,), (lambda g: g / x.value,))


def square(x) -> Var:
    x = as_var(x)
    return Var(x.value**2, (x,), (lambda g: g * 2.0 * x.value,))


def sqrt(x) -> Var:
    x = as_var(x)
    s = np.sqrt(x.value)
    return Var(s, (x,), (lambda g: g * 0.5 / s,))


def vsum(x, axis=None) -> Var:
    x = as_var(x)
    shape = x.value.shape

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, shape).astype(np.float64)
        return np.broadcast_to(np.expand_dims(g, axis), shape).astype(np.float64)

    return Var(x.value.sum(axis=axis), (x,), (vjp,))


def vmean(x, axis=None) -> Var:
    x = as_var(x)
    shape = x.value.shape
    n = x.value.size if axis is None else shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, shape).astype(np.float64)
        return np.broadcast_to(np.expand_dims(g, axis) / n, shape).astype(np.float64)

    return Var(x.value.mean(axis=axis), (x,), (vjp,))


def concat(parts, axis=-1) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            return g[tuple(idx)]

        return vjp

    return Var(
        np.concatenate([p.value for p in parts], axis=axis),
        tuple(parts),
        tuple(make_vjp(i) for i in range(len(parts))),
    )


def narrow(x, lo: int, hi: int) -> Var:
    """Slice [lo, hi) along the last axis."""
    x = as_var(x)
    shape = x.value.shape

    def vjp(g):
        out = np.zeros(shape)
        out[..., lo:hi] = g
        return out

    return Var(x.value[..., lo:hi], (x,), (vjp,))


def backward(root: Var) -> None:
    """Accumulate gradients of a scalar `root` into `.grad` of every node."""
    if root.value.size != 1:
        raise ValueError("backward expects a scalar root")
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            g = vjp(node.grad)
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


class TrainingError(RuntimeError):
    """Raised when a loss or gradient turns non-finite during training."""


def value_and_grad(loss_fn, params: list[np.ndarray]):
    """Evaluate `loss_fn` on Var-wrapped `params`; return (value, grads).

    `loss_fn` must build a scalar Var out of the supported primitives.
    Raises TrainingError on a non-finite loss.
    """
    param_vars = [Var(p) for p in params]
    loss = loss_fn(param_vars)
    val = float(loss.value)
    if not np.isfinite(val):
        raise TrainingError(f"non-finite loss value: {val}")
    backward(loss)
    grads = [
        pv.grad if pv.grad is not None else np.zeros_like(pv.value) for pv in param_vars
    ]
    return val, grads


def finite_difference_grad(loss_fn, params: list[np.ndarray], step: float = 1e-5):
    """Central-difference gradient of `loss_fn`, the oracle for gradient checks."""
    grads = []
    work = [p.copy() for p in params]

    def evaluate():
        return float(loss_fn([Var(p) for p in work]).value)

    for i, p in enumerate(work):
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = evaluate()
            flat[j] = orig - step
            lo = evaluate()
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def gradient_check(loss_fn, params: list[np.ndarray], step: float = 1e-5) -> float:
    """Max relative error between reverse-mode and finite-difference gradients."""
    _, analytic = value_and_grad(loss_fn, params)
    numeric = finite_difference_grad(loss_fn, params, step=step)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
