"""Dense tensors with reverse-mode automatic differentiation.

Values live in flat numpy arrays (row-major). Every operation that touches a
tensor requiring gradients records its parents plus a vector-Jacobian closure;
`backward()` on a scalar walks the recorded graph once in reverse topological
order and accumulates gradients on the leaves.

Two precision modes exist per run: 64-bit for verification (gradient checks,
bit-exact determinism) and 32-bit for faster training.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, NumericalError, UsageError

_DTYPES = {"f32": np.float32, "f64": np.float64}
_active_dtype = np.float64
_grad_enabled = True


def set_precision(mode):
    """Select the run-wide scalar width: "f64" (verification) or "f32" (training)."""
    global _active_dtype
    if mode not in _DTYPES:
        raise UsageError(f"unknown precision mode {mode!r}; expected one of {sorted(_DTYPES)}")
    _active_dtype = _DTYPES[mode]


def active_dtype():
    return _active_dtype


def precision_mode():
    return "f64" if _active_dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(mode):
    """Temporarily switch precision (used heavily by tests)."""
    before = precision_mode()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(before)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    before = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = before


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional array of real scalars, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _active_dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._vjp = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def item(self):
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def check_finite(self, context=""):
        """Surface the NaN/Inf error state instead of propagating it silently."""
        if not np.all(np.isfinite(self.data)):
            where = f" in {context}" if context else ""
            raise NumericalError(f"non-finite values detected{where}")
        return self

    def zero_grad(self):
        self.grad = None

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UsageError("tensor/tensor division is not part of the op set")
        return mul(self, Tensor(np.asarray(1.0 / other, dtype=self.data.dtype)))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method sugar --------------------------------------------------------

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def permute(self, axes):
        return permute(self, axes)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)

    def backward(self):
        backward(self)


def _lift(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=_active_dtype))


def _record(data, parents, vjp):
    """Wrap an op result; keep the graph only when some parent needs it."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


# -- backward engine ---------------------------------------------------------


def tape(root):
    """Topological order of the recorded operations reachable from `root`.

    Parents always precede their consumers; a backward pass visits each node
    exactly once in the reversed order.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or node._vjp is None:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen and parent._vjp is not None:
                stack.append((parent, False))
    return order


def backward(loss):
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    Repeated calls without `zero_grad` accumulate.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward requires a scalar loss, got shape {loss.data.shape}")

    order = tape(loss)
    adjoints = {id(loss): np.ones_like(loss.data)}
    holders = {id(loss): loss}
    for node in reversed(order):
        grad_out = adjoints.pop(id(node), None)
        if grad_out is None:
            continue
        for parent, grad_in in zip(node._parents, node._vjp(grad_out)):
            if grad_in is None:
                continue
            if not (parent.requires_grad or parent._parents):
                continue
            key = id(parent)
            prev = adjoints.get(key)
            adjoints[key] = grad_in if prev is None else prev + grad_in
            holders[key] = parent
    for key, grad in adjoints.items():
        leaf = holders[key]
        if leaf.requires_grad:
            leaf.grad = np.array(grad, copy=True) if leaf.grad is None else leaf.grad + grad


# -- broadcasting helpers ------------------------------------------------------


def _binary_shape(a, b):
    """Same-rank broadcasting where differing axes must be singletons."""
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if len(sa) != len(sb):
        raise DimensionError(f"rank mismatch for elementwise op: {sa} vs {sb}")
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"incompatible extents for elementwise op: {sa} vs {sb}")


def _unbroadcast(grad, shape):
    """Reduce a broadcast gradient back to `shape`."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    axes = tuple(i for i, (gs, ss) in enumerate(zip(grad.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ops -----------------------------------------------------------


def add(a, b):
    _binary_shape(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record(out, (a, b), vjp)


def sub(a, b):
    _binary_shape(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record(out, (a, b), vjp)


def mul(a, b):
    _binary_shape(a, b)
    out = a.data * b.data

    def vjp(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _record(out, (a, b), vjp)


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a):
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _record(out, (a,), vjp)


def log(a):
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _record(out, (a,), vjp)


def tanh(a):
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record(out, (a,), vjp)


def sigmoid(a):
    # tanh formulation: stable for large |x| and strictly inside (0, 1)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record(out, (a,), vjp)


def relu(a):
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _record(out, (a,), vjp)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    axes = tuple(a % ndim for a in axis)
    if len(set(axes)) != len(axes):
        raise UsageError(f"duplicate reduction axes {axis}")
    return axes


def tsum(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.data.shape),)

    return _record(np.asarray(out), (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / count

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk * inv, a.data.shape),)

    return _record(np.asarray(out), (a,), vjp)


# -- shape ops ------------------------------------------------------------------


def reshape(a, shape):
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as err:
        raise DimensionError(f"cannot reshape {a.data.shape} to {shape}") from err

    def vjp(g):
        return (g.reshape(a.data.shape),)

    return _record(out, (a,), vjp)


def permute(a, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {a.ndim}")
    inverse = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def vjp(g):
        return (g.transpose(inverse),)

    return _record(out, (a,), vjp)


def broadcast_to(a, shape):
    shape = tuple(shape)
    if len(shape) != a.ndim:
        raise DimensionError(f"broadcast_to keeps rank: {a.data.shape} vs {shape}")
    for src, dst in zip(a.data.shape, shape):
        if src != dst and src != 1:
            raise DimensionError(f"cannot broadcast {a.data.shape} to {shape}")
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.data.shape),)

    return _record(out, (a,), vjp)


def concat(tensors, axis):
    tensors = list(tensors)
    if not tensors:
        raise UsageError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    base = list(tensors[0].shape)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise DimensionError("concat rank mismatch")
        for i, (x, y) in enumerate(zip(base, other)):
            if i != axis and x != y:
                raise DimensionError(
                    f"concat extent mismatch on axis {i}: {tensors[0].shape} vs {t.shape}"
                )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(tensors), vjp)


# -- linear algebra --------------------------------------------------------------


def matmul(a, b):
    """Matrix product; leading axes are treated as an aligned batch."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner extents disagree: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch extents disagree: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if a.requires_grad or a._parents:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad or b._parents:
            if b.ndim == 2 and a.ndim > 2:
                contract = tuple(range(a.ndim - 1))
                gb = np.tensordot(a.data, g, axes=(contract, contract))
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), vjp)


def softmax(x, axis):
    """Stable softmax along `axis`; slices sum to one."""
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record(out, (x,), vjp)


def log_softmax(x, axis):
    axis = axis % x.ndim
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _record(out, (x,), vjp)


def l2_normalize(x, axis, epsilon=1e-8):
    """Scale slices along `axis` to unit Euclidean norm.

    Slices whose norm falls below `epsilon` are divided by `epsilon` instead,
    so zero slices stay zero.
    """
    if epsilon <= 0:
        raise UsageError("epsilon must be positive")
    axis = axis % x.ndim
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, epsilon)
    out = x.data / denom

    def vjp(g):
        inner = (g * x.data).sum(axis=axis, keepdims=True)
        correction = np.where(norm > epsilon, inner / (denom * denom * denom), 0.0)
        return (g / denom - x.data * correction,)

    return _record(out, (x,), vjp)
