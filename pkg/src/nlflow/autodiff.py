"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: every operation builds a `Tensor` node holding its value, its
parent nodes, and a closure that scatters the output adjoint onto the
parents.  `backward(loss)` topologically sorts the graph reachable from the
loss and runs the closures in reverse.  Gradients accumulate into leaf
`.grad` buffers, so several graphs (e.g. per-case losses) can be backpropped
before one optimizer step; call `zero_grad` between steps.

Input derivatives of a network (needed inside PDE residuals) are obtained
by forward tangent propagation built from these same primitives (see
`nlflow.nets.forward_with_tangents`), so reverse mode through a tangent
yields exact mixed second-order parameter gradients.

Only the primitives needed by this package are provided; shapes are numpy
broadcast semantics except `matmul`, which is strictly 2-D.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "const",
    "param",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "tanh",
    "tanh_deriv",
    "tanh_tangent_mul",
    "rows",
    "square",
    "gather",
    "min0",
    "max0",
    "sum_all",
    "mean_all",
    "reshape",
    "backward",
    "zero_grad",
]


class Tensor:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad",
                 "aux")

    def __init__(self, value, parents=(), backward_fn=None,
                 requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(
            p.requires_grad for p in parents
        )
        self.aux = None  # op-private cache (e.g. tanh keeps 1 - a^2 here)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def accumulate(self, g):
        # First contribution is stored by reference (callers hand over
        # fresh temporaries or arrays nobody mutates); later contributions
        # add out of place so the stored array is never written through.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # convenience arithmetic (wraps bare numbers/arrays as constants)
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

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"


def const(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=np.float64), requires_grad=True)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` to ``shape`` by summing broadcast axes."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.value.shape))

    out.backward_fn = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.value - b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.value.shape))

    out.backward_fn = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * a.value, b.value.shape))

    out.backward_fn = bwd
    return out


def div(a, b) -> Tensor:
    a, b = const(a), const(b)
    out = Tensor(a.value / b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b.accumulate(
                _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)
            )

    out.backward_fn = bwd
    return out


def neg(a) -> Tensor:
    a = const(a)
    out = Tensor(-a.value, (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(-g)

    out.backward_fn = bwd
    return out


def matmul(a, b) -> Tensor:
    a, b = const(a), const(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    out = Tensor(a.value @ b.value, (a, b))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g @ b.value.T)
        if b.requires_grad:
            b.accumulate(a.value.T @ g)

    out.backward_fn = bwd
    return out


def affine(x, w, b) -> Tensor:
    """x @ w + b in one node (saves an intermediate on the hot path)."""
    x, w, b = const(x), const(w), const(b)
    out = Tensor(x.value @ w.value + b.value, (x, w, b))

    def bwd(g):
        if x.requires_grad:
            x.accumulate(g @ w.value.T)
        if w.requires_grad:
            w.accumulate(x.value.T @ g)
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.value.shape))

    out.backward_fn = bwd
    return out


def tanh(a) -> Tensor:
    a = const(a)
    val = np.tanh(a.value)
    d = 1.0 - val * val
    out = Tensor(val, (a,))
    out.aux = d

    def bwd(g):
        if a.requires_grad:
            a.accumulate(d * g)

    out.backward_fn = bwd
    return out


def tanh_deriv(a_tanh: Tensor) -> np.ndarray:
    """1 - a^2 as a plain array for a tanh output node ``a_tanh``."""
    if a_tanh.aux is not None:
        return a_tanh.aux
    av = a_tanh.value
    return 1.0 - av * av


def tanh_tangent_mul(a_tanh, u, d=None) -> Tensor:
    """(1 - a^2) * u where ``a_tanh`` is a tanh output node.

    One node instead of three for the tangent chain rule through a tanh
    layer.  ``u`` may stack several tangent directions along axis 0 (its
    row count an integer multiple of the activation's); 1 - a^2 then
    applies to each block, which keeps all directions in a single node.
    """
    a_tanh, u = const(a_tanh), const(u)
    av = a_tanh.value
    if d is None:
        d = tanh_deriv(a_tanh)
    n, m = av.shape
    reps = u.value.shape[0] // n
    if u.value.shape != (reps * n, m) or reps < 1:
        raise ValueError("tangent rows must stack the activation shape")

    if reps == 1:
        out = Tensor(d * u.value, (a_tanh, u))

        def bwd(g):
            if a_tanh.requires_grad:
                t = av * u.value
                t *= g
                t *= -2.0
                a_tanh.accumulate(t)
            if u.requires_grad:
                u.accumulate(d * g)

    else:
        uv = u.value.reshape(reps, n, m)
        out = Tensor((d * uv).reshape(reps * n, m), (a_tanh, u))

        def bwd(g):
            gv = g.reshape(reps, n, m)
            if a_tanh.requires_grad:
                # sum_r u_r * g_r without materializing the (reps, n, m)
                # product
                t = uv[0] * gv[0]
                for r in range(1, reps):
                    t += uv[r] * gv[r]
                t *= av
                t *= -2.0
                a_tanh.accumulate(t)
            if u.requires_grad:
                u.accumulate((d * gv).reshape(reps * n, m))

    out.backward_fn = bwd
    return out


def rows(a, start: int, stop: int) -> Tensor:
    """Row slice a[start:stop] of a 2-D tensor."""
    a = const(a)
    if a.value.ndim != 2:
        raise ValueError("rows expects a 2-D tensor")
    out = Tensor(a.value[start:stop], (a,))

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.value)
            buf[start:stop] = g
            a.accumulate(buf)

    out.backward_fn = bwd
    return out


def square(a) -> Tensor:
    a = const(a)
    out = Tensor(a.value * a.value, (a,))

    def bwd(g):
        if a.requires_grad:
            t = a.value * g
            t += t
            a.accumulate(t)

    out.backward_fn = bwd
    return out


def gather(a, idx) -> Tensor:
    """a[idx] for a 1-D tensor and an integer index array of any shape."""
    a = const(a)
    if a.value.ndim != 1:
        raise ValueError("gather expects a 1-D tensor")
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.value[idx], (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(
                np.bincount(
                    idx.ravel(), weights=g.ravel(), minlength=a.value.shape[0]
                )
            )

    out.backward_fn = bwd
    return out


def min0(a) -> Tensor:
    """Elementwise min(a, 0); subgradient 0 at the kink."""
    a = const(a)
    out = Tensor(np.minimum(a.value, 0.0), (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (a.value < 0.0))

    out.backward_fn = bwd
    return out


def max0(a) -> Tensor:
    """Elementwise max(a, 0); subgradient 0 at the kink."""
    a = const(a)
    out = Tensor(np.maximum(a.value, 0.0), (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g * (a.value > 0.0))

    out.backward_fn = bwd
    return out


def sum_all(a) -> Tensor:
    a = const(a)
    out = Tensor(a.value.sum(), (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, a.value.shape))

    out.backward_fn = bwd
    return out


def mean_all(a) -> Tensor:
    a = const(a)
    n = a.value.size
    out = Tensor(a.value.mean(), (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g / n, a.value.shape))

    out.backward_fn = bwd
    return out


def reshape(a, shape) -> Tensor:
    a = const(a)
    out = Tensor(a.value.reshape(shape), (a,))

    def bwd(g):
        if a.requires_grad:
            a.accumulate(g.reshape(a.value.shape))

    out.backward_fn = bwd
    return out


def _topo(loss: Tensor):
    """Iterative post-order over nodes that require gradients."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Backpropagate d(loss)/d(leaf) into leaf ``.grad`` buffers.

    ``loss`` must be scalar.  Gradients accumulate; run ``zero_grad`` on the
    leaves before a fresh accumulation round.  Each graph should be
    backpropped once.
    """
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
