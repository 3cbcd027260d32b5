"""Dense float64 tensors with reverse-mode autodiff.

Define-by-run: every differentiable op appends a node (parents + backward
closure) onto the output tensor, and Tensor.backward() replays the tape in
reverse topological order. Broadcasting is supported for scalars and for
trailing-dim patterns like C x 1 x 1 or 1 x H x W against B x C x H x W,
which is all the feature math here needs.
"""

import numpy as np

from .errors import DomainError, ShapeError, UsageError
from . import kernels

_DIV_FLOOR = 1e-300


def _as_array(x):
    return np.asarray(x, dtype=np.float64)


def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % ndim if -ndim <= a < ndim else a for a in axes))
    if len(axes) == 0:
        raise UsageError("empty axis set")
    for a in axes:
        if not 0 <= a < ndim:
            raise ShapeError(f"axis {a} invalid for ndim {ndim}")
    if len(set(axes)) != len(axes):
        raise UsageError(f"duplicate axes {axes}")
    return axes


def _check_broadcast(sa, sb):
    try:
        return np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ShapeError(f"shapes {sa} and {sb} are not broadcast-compatible") from None


def _unbroadcast(grad, shape):
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    def __init__(self, data, requires_grad=False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._backward_done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data, parents, backward_fn):
        out = Tensor(data)
        live = [p for p in parents if p.requires_grad or p._parents]
        if live:
            out.requires_grad = any(p.requires_grad for p in parents)
            out._parents = tuple(parents)
            out._backward = backward_fn
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of size {self.data.size}")
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- autodiff -------------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise UsageError("backward() requires a scalar loss tensor")
        if self._backward_done:
            raise UsageError("backward() already ran on this tape; rebuild the graph")
        self._backward_done = True

        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar -------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(Tensor(other) if not isinstance(other, Tensor) else other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _coerce(b):
    return b if isinstance(b, Tensor) else Tensor(b)


# -- elementwise ops ---------------------------------------------------------

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward)


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a.shape, b.shape)
    if np.any(np.abs(b.data) < _DIV_FLOOR):
        raise DomainError("division by element with magnitude < 1e-300")
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return Tensor._from_op(out, (a, b), backward)


def scale(a, c):
    c = float(c)
    out = a.data * c

    def backward(g):
        return (g * c,)

    return Tensor._from_op(out, (a,), backward)


def relu(a):
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0)

    def backward(g):
        return (g * mask,)

    return Tensor._from_op(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return Tensor._from_op(out, (a,), backward)


def log(a):
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive element")
    out = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return Tensor._from_op(out, (a,), backward)


def square(a):
    out = a.data * a.data

    def backward(g):
        return (g * 2.0 * a.data,)

    return Tensor._from_op(out, (a,), backward)


ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "relu": relu,
    "exp": exp,
    "log": log,
    "square": square,
}


def elementwise(op_kind, a, b=None):
    """Dispatch by name; binary kinds require b, unary kinds forbid it."""
    if op_kind not in ELEMENTWISE:
        raise UsageError(f"unknown elementwise op {op_kind!r}")
    fn = ELEMENTWISE[op_kind]
    if op_kind in ("add", "sub", "mul", "div", "scale"):
        if b is None:
            raise UsageError(f"{op_kind} needs a second operand")
        return fn(a, b)
    if b is not None:
        raise UsageError(f"{op_kind} is unary")
    return fn(a)


# -- shape ops ---------------------------------------------------------------

def reshape(a, shape):
    if int(np.prod(shape)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return Tensor._from_op(out, (a,), backward)


# -- matmul / conv -----------------------------------------------------------

def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dims differ: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), backward)


def conv2d(x, w, stride=1, padding=0):
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError("conv2d expects B x Cin x H x W input and Cout x Cin x k x k kernel")
    B, Cin, H, W = x.shape
    Cout, Cin_w, k, k2 = w.shape
    if stride != 1:
        raise ShapeError("only stride 1 is supported")
    if k != k2 or k not in (1, 3):
        raise ShapeError(f"kernel must be square with k in {{1, 3}}, got {k}x{k2}")
    if Cin != Cin_w:
        raise ShapeError(f"input channels {Cin} != kernel channels {Cin_w}")
    if H + 2 * padding - k + 1 < 1 or W + 2 * padding - k + 1 < 1:
        raise ShapeError("output spatial extent would be < 1")
    xd = np.ascontiguousarray(x.data)
    wd = np.ascontiguousarray(w.data)
    out = kernels.conv2d_forward(xd, wd, padding)

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = kernels.conv2d_grad_input(g, wd, padding, x.shape)
        gw = kernels.conv2d_grad_kernel(g, xd, padding, w.shape)
        return gx, gw

    return Tensor._from_op(out, (x, w), backward)


# -- softmax family ----------------------------------------------------------

def softmax(x, axes=None):
    axes = _normalize_axes(axes, x.data.ndim)
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=axes, keepdims=True)
        return ((g - dot) * out,)

    return Tensor._from_op(out, (x,), backward)


def log_softmax(x, axes=None):
    axes = _normalize_axes(axes, x.data.ndim)
    shifted = x.data - x.data.max(axis=axes, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axes, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def backward(g):
        return (g - sm * g.sum(axis=axes, keepdims=True),)

    return Tensor._from_op(out, (x,), backward)


# -- reductions --------------------------------------------------------------

def reduce_sum(x, axes=None, keepdims=False):
    axes = _normalize_axes(axes, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(out, (x,), backward)


def reduce_mean(x, axes=None, keepdims=False):
    axes = _normalize_axes(axes, x.data.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    return scale(reduce_sum(x, axes, keepdims), 1.0 / n)


def reduce_var(x, axes=None, keepdims=False):
    """Population variance (divisor N) over the given axes."""
    mu = reduce_mean(x, axes, keepdims=True)
    return reduce_mean(square(sub(x, mu)), axes, keepdims)


def reduce(x, kind, axes=None, keepdims=False):
    if kind == "sum":
        return reduce_sum(x, axes, keepdims)
    if kind == "mean":
        return reduce_mean(x, axes, keepdims)
    if kind == "var_population":
        return reduce_var(x, axes, keepdims)
    raise UsageError(f"unknown reduction {kind!r}")


# -- gradient checking -------------------------------------------------------

def grad_check(f, x, h=1e-6):
    """Max relative error between autodiff and central finite differences.

    f maps a Tensor to a scalar Tensor; the step for element i is
    h * max(1, |x_i|). Relative error per element is
    |analytic - numeric| / max(1, |numeric|).
    """
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    xt = Tensor(x.data.copy() if isinstance(x, Tensor) else x, requires_grad=True)
    loss = f(xt)
    if not np.all(np.isfinite(loss.data)):
        raise DomainError("non-finite loss in grad_check")
    loss.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)

    flat = xt.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = f(Tensor(xt.data.copy())).item()
        flat[i] = orig - step
        fm = f(Tensor(xt.data.copy())).item()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError("non-finite intermediate in finite differences")
        numeric[i] = (fp - fm) / (2.0 * step)
    numeric = numeric.reshape(xt.data.shape)
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
