"""Reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a vector-Jacobian product written in
terms of other recorded operations, so a gradient computed with
``create_graph=True`` is itself differentiable.  Node ids are handed out from
a global counter; creation order is therefore a valid topological order and
the backward pass simply visits reachable nodes by descending id.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = -1e30

_ids = itertools.count(1)
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named operator."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericDomainError(ArithmeticError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """A float64 array that may participate in a computation graph."""

    __slots__ = ("data", "requires_grad", "parents", "vjp", "node_id", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.vjp = None
        self.node_id = next(_ids) if requires_grad else None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data.item())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{tag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = next(_ids)
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _check_finite(op: str, data: np.ndarray):
    if not np.all(np.isfinite(data)):
        raise NumericDomainError(f"{op}: non-finite result")


# -- elementwise binary ---------------------------------------------------
def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (sum_to(g, a.shape), sum_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("divide: division by zero")
    return _record(a.data / b.data, (a, b),
                   lambda g: (sum_to(g / b, a.shape), sum_to(-g * a / (b * b), b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", "operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape} @ {b.shape}")

    def vjp(g):
        return (sum_to(matmul(g, swapaxes(b)), a.shape),
                sum_to(matmul(swapaxes(a), g), b.shape))

    return _record(np.matmul(a.data, b.data), (a, b), vjp)


# -- elementwise unary ----------------------------------------------------
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = _record(np.exp(a.data), (a,), lambda g: (g * out,))
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log: argument must be positive")
    return _record(np.log(a.data), (a,), lambda g: (g / a,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _record(np.tanh(a.data), (a,), lambda g: (g * (1.0 - out * out),))
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    z = np.exp(-np.abs(x))
    val = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = _record(val, (a,), lambda g: (g * out * (1.0 - out),))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)  # derivative at 0 is 0
    return _record(a.data * mask, (a,), lambda g: (g * mask,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise NumericDomainError("power: negative base with fractional exponent")
    if p < 1 and np.any(a.data == 0):
        raise NumericDomainError("power: zero base with exponent below 1")
    if p == 2.0:
        return _record(a.data * a.data, (a,), lambda g: (g * 2.0 * a,))
    return _record(a.data ** p, (a,), lambda g: (g * p * power(a, p - 1.0),))


# -- reductions -----------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    kshape = _keepdims_shape(a.shape, axes)

    def vjp(g):
        return (broadcast_to(reshape(g, kshape), a.shape),)

    return _record(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axis, keepdims) * (1.0 / n)


def max_(a, axis=None, keepdims=False) -> Tensor:
    """Maximum along ``axis``; ties route the gradient to the first maximal entry."""
    a = as_tensor(a)
    if axis is None:
        flat = reshape(a, (a.size,))
        return max_(flat, 0, keepdims=False) if not keepdims else reshape(
            max_(flat, 0), (1,) * a.ndim)
    axis = axis % a.ndim
    idx = np.argmax(a.data, axis=axis)
    mask = np.zeros_like(a.data)
    np.put_along_axis(mask, np.expand_dims(idx, axis), 1.0, axis=axis)
    kshape = _keepdims_shape(a.shape, (axis,))
    val = np.max(a.data, axis=axis, keepdims=keepdims)
    return _record(val, (a,), lambda g: (broadcast_to(reshape(g, kshape), a.shape) * mask,))


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    m = np.max(a.data, axis=axis, keepdims=True)
    val = m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))
    kshape = val.shape
    if not keepdims:
        val = np.squeeze(val, axis=axis)

    def vjp(g):
        out_k = reshape(out, kshape)
        weights = exp(a - out_k)
        return (broadcast_to(reshape(g, kshape), a.shape) * weights,)

    out = _record(val, (a,), vjp)
    return out


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    val = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - sum_(g * out, axis=axis, keepdims=True)),)

    out = _record(val, (a,), vjp)
    return out


def log_softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


# -- structural -----------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        val = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} to {shape}") from None
    return _record(val, (a,), lambda g: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (transpose(g, inv),))


def swapaxes(a) -> Tensor:
    """Swap the two trailing axes."""
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        val = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", f"cannot broadcast {a.shape} to {shape}") from None
    return _record(val, (a,), lambda g: (sum_to(g, a.shape),))


def sum_to(a, shape) -> Tensor:
    """Sum ``a`` down to ``shape``; the adjoint of broadcasting."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and a.shape[i + lead] != 1)
    val = np.sum(a.data, axis=axes, keepdims=True)
    if lead:
        val = val.reshape(val.shape[lead:])
    return _record(val, (a,), lambda g: (broadcast_to(g, a.shape),))


def concatenate(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i]
                                 for i in range(ndim) if i != axis):
            raise ShapeError("concatenate",
                             f"shape {t.shape} incompatible with {tensors[0].shape}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g):
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * ndim
            idx[axis] = slice(int(lo), int(hi))
            grads.append(getitem(g, tuple(idx)))
        return tuple(grads)

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp)


def stack(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim + 1
    axis = axis % ndim
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis=axis)


def getitem(a, idx) -> Tensor:
    """Basic or advanced indexing (the catalog's slice operator)."""
    a = as_tensor(a)
    try:
        val = a.data[idx]
    except IndexError as err:
        raise ShapeError("slice", str(err)) from None
    return _record(val, (a,), lambda g: (index_add(g, idx, a.shape),))


def index_add(g, idx, shape) -> Tensor:
    """Scatter ``g`` into zeros of ``shape`` at ``idx``, accumulating repeats."""
    g = as_tensor(g)
    val = np.zeros(shape)
    np.add.at(val, idx, g.data)
    return _record(val, (g,), lambda gg: (getitem(gg, idx),))


def pad_time(a, before: int, after: int, axis=1, value: float = 0.0) -> Tensor:
    """Pad along ``axis`` with a constant."""
    a = as_tensor(a)
    parts = []
    for n in (before, after):
        shape = list(a.shape)
        shape[axis] = n
        parts.append(Tensor(np.full(shape, value)))
    pieces = [p for p, n in zip([parts[0], a, parts[1]], [before, 1, after]) if n]
    return concatenate(pieces, axis=axis) if len(pieces) > 1 else a


def conv1d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """Valid cross-correlation over time.

    x: (B, T, C_in); kernel: (C_out, C_in, W); bias: (C_out,).  Returns
    (B, floor((T - W) / stride) + 1, C_out).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 3:
        raise ShapeError("conv1d", "expected x (B, T, C) and kernel (out, in, window)")
    c_out, c_in, width = kernel.shape
    if x.shape[2] != c_in:
        raise ShapeError("conv1d", f"input channels {x.shape[2]} != kernel channels {c_in}")
    T = x.shape[1]
    if T < width:
        raise ShapeError("conv1d", f"input length {T} shorter than window {width}")
    t_out = (T - width) // stride + 1
    span = stride * (t_out - 1) + 1
    out = None
    for j in range(width):
        xs = x[:, j:j + span:stride, :]
        term = matmul(xs, transpose(kernel[:, :, j]))
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out


def norm(a, axis=None) -> Tensor:
    """Euclidean norm with a zero (sub)gradient where the norm vanishes."""
    a = as_tensor(a)
    sq = sum_(a * a, axis=axis)
    zero = (sq.data == 0).astype(np.float64)
    # safe argument keeps power() away from 0; the mask restores the exact value
    root = power(sq + zero, 0.5)
    return root * (1.0 - zero)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select ``a`` where ``mask`` is true else ``b``; the mask is a constant."""
    m = np.asarray(mask, dtype=np.float64)
    return as_tensor(a) * m + as_tensor(b) * (1.0 - m)


# -- differentiation ------------------------------------------------------
def _ancestors(roots: Iterable[Tensor]) -> list:
    seen = {}
    stack_ = [r for r in roots if r.requires_grad]
    while stack_:
        node = stack_.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack_.extend(p for p in node.parents if p.requires_grad and p.node_id not in seen)
    return sorted(seen.values(), key=lambda n: n.node_id, reverse=True)


def gradient(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False,
             grad_output=None) -> list:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors the output does not depend on receive zeros.  With
    ``create_graph=True`` the returned gradients are recorded and may be
    differentiated again.
    """
    if grad_output is None and output.size != 1:
        raise ContractError("gradient: output must be a scalar")
    seed = Tensor(np.ones_like(output.data)) if grad_output is None else as_tensor(grad_output)
    grads: dict = {}
    if output.requires_grad:
        grads[output.node_id] = seed
    keep = {t.node_id for t in wrt if t.requires_grad}
    # nodes created before every target cannot lie on a path to one
    floor = min(keep) if keep else 0
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        for node in _ancestors([output]):
            if node.node_id <= floor:
                break
            g = grads.get(node.node_id) if node.node_id in keep else grads.pop(node.node_id, None)
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(parent.node_id)
                grads[parent.node_id] = pg if prev is None else prev + pg
    out = []
    for t in wrt:
        g = grads.get(t.node_id) if t.requires_grad else None
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out


def evaluate(fn: Callable, inputs: dict, requires_grad: bool = False) -> dict:
    """Run ``fn(**inputs)`` on fresh tensors and return named numpy outputs."""
    tensors = {k: Tensor(np.array(v, dtype=np.float64), requires_grad=requires_grad)
               for k, v in inputs.items()}
    result = fn(**tensors)
    if isinstance(result, Tensor):
        result = {"output": result}
    return {k: v.data for k, v in result.items()}


def finite_difference_check(fn: Callable, point: Sequence, step: float = 1e-5) -> float:
    """Largest relative discrepancy between analytic and central-difference gradients.

    ``fn`` maps a list of tensors to a scalar tensor.  The discrepancy for one
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    analytic = [g.data for g in gradient(fn(leaves), leaves)]
    worst = 0.0
    for k, base in enumerate(arrays):
        for i in np.ndindex(base.shape):
            vals = []
            for sgn in (1.0, -1.0):
                probe = [a.copy() for a in arrays]
                probe[k][i] += sgn * step
                # leaves stay differentiable so fn may itself call gradient()
                vals.append(fn([Tensor(a, requires_grad=True) for a in probe]).item())
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            err = abs(analytic[k][i] - numeric) / max(1.0, abs(analytic[k][i]))
            worst = max(worst, err)
    return worst
