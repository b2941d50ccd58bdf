"""Dense tensors with tape-based reverse-mode automatic differentiation.

Every differentiable operation produces a new :class:`Tensor` that remembers
its inputs and a backward rule.  Calling :func:`backward` on a scalar loss
records the reachable operations on a :class:`ComputationTape` in execution
order, walks it in reverse once, writes ``grad`` on every leaf that requires
it, and then consumes the tape so that it cannot be replayed.

Broadcasting is deliberately limited to scalar-with-tensor; everything else
needs an explicit :func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np

from glf.errors import ConfigurationError, DomainError, NumericError, UsageError

DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_sequence = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (evaluation, sampling)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """An n-dimensional float32/float64 array that can carry a gradient.

    Leaves are created directly; non-leaves come out of operations.  ``grad``
    is only populated on leaves with ``requires_grad=True``, and only by
    :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward",
                 "_op", "_seq", "_consumed", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in DTYPES:
            if dtype is None and (arr.dtype.kind in "iub"):
                arr = arr.astype(np.float64)
            else:
                raise ConfigurationError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if any(n <= 0 for n in arr.shape):
            raise ConfigurationError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None
        self._seq = next(_sequence)
        self._consumed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axes=None):
        return reduce_sum(self, axes)

    def mean(self, axes=None):
        return reduce_mean(self, axes)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """A trainable leaf.  Optimizers update ``data`` in place between passes."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def _not_scalar(t):
    raise UsageError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def make_op(data, parents, backward_fn, op):
    """Wrap the result of a forward computation as a node on the graph.

    ``backward_fn(g)`` must return one gradient (or None) per parent.  Any
    non-finite output raises :class:`NumericError` naming ``op``.
    """
    if not np.all(np.isfinite(data)):
        rows = None
        if np.ndim(data):
            rows = np.unique(np.nonzero(~np.isfinite(data))[0]).tolist()
        where = f" (first bad batch index {rows[0]})" if rows else ""
        raise NumericError(f"{op}: non-finite values in output{where}", batch_indices=rows)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


# -- computation tape -------------------------------------------------------
class ComputationTape:
    """Operations reachable from a loss, in the order they were executed.

    Sequence numbers grow monotonically with creation time, so sorting the
    reachable nodes by them yields a topological order.
    """

    def __init__(self, loss):
        nodes = []
        seen = set()
        stack = [loss]
        while stack:
            node = stack.pop()
            if id(node) in seen or not node._parents:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node._parents)
        nodes.sort(key=lambda n: n._seq)
        self.nodes = nodes
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def run(self, loss):
        if self.consumed:
            raise UsageError("backward: tape already consumed")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = []
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise RuntimeError(f"{node._op}: gradient shape {pg.shape} != {parent.data.shape}")
                if parent._parents:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    if parent.grad is None:
                        leaves.append(parent)
                        parent.grad = np.array(pg, dtype=parent.data.dtype, copy=True)
                    else:
                        parent.grad += pg
        self._consume()
        return leaves

    def _consume(self):
        for node in self.nodes:
            node._parents = ()
            node._backward = None
            node._consumed = True
            node.requires_grad = False
        self.consumed = True


def backward(loss):
    """Populate ``grad`` of every requires-grad leaf reachable from ``loss``.

    Raises UsageError for a non-scalar loss, an empty or consumed tape, or a
    leaf whose gradient was not reset since a previous backward pass.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward: tape already consumed by an earlier backward call")
    if not loss._parents:
        if loss.requires_grad:
            if loss.grad is not None:
                raise UsageError("backward: leaf gradient not reset")
            loss.grad = np.ones_like(loss.data)
            return
        raise UsageError("backward: empty tape (loss does not depend on any requires_grad tensor)")
    tape = ComputationTape(loss)
    stale = _stale_leaves(tape)
    if stale:
        raise UsageError(f"backward: {stale} leaf gradient(s) not reset since the last backward pass")
    tape.run(loss)


def _stale_leaves(tape):
    count = 0
    for node in tape.nodes:
        for p in node._parents:
            if not p._parents and p.requires_grad and p.grad is not None:
                count += 1
    return count


# -- elementwise ----------------------------------------------------------------
def _binary_operands(a, b, op):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if a.dtype != b.dtype:
        raise ConfigurationError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise ConfigurationError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g, shape):
    return g if g.shape == shape else np.asarray(g.sum()).reshape(shape)


def add(a, b):
    a, b = _binary_operands(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, (a, b), bw, "mul")


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c):
    """Multiply by a Python constant."""
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    x = a.data
    return make_op(np.log(x), (a,), lambda g: (g / x,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, a.data.dtype.type(0)), (a,),
                   lambda g: (g * mask,), "relu")


def square(a):
    return mul(a, a)


# -- linear algebra ---------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ConfigurationError(f"matmul: expected 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul: inner extents differ ({a.shape} @ {b.shape})")
    if a.dtype != b.dtype:
        raise ConfigurationError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_op(ad @ bd, (a, b), bw, "matmul")


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ConfigurationError("transpose: expected a 2-d tensor")
    return make_op(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


# -- shape manipulation --------------------------------------------------------------
def _normalize_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ConfigurationError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce_sum(x, axes=None):
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), shape).copy(),)

    return make_op(np.asarray(x.data.sum(axis=axes)), (x,), bw, "sum")


def reduce_mean(x, axes=None):
    x = as_tensor(x)
    axes = _normalize_axes(axes, x.ndim)
    count = 1
    for ax in axes:
        count *= x.shape[ax]
    return scale(reduce_sum(x, axes), 1.0 / count)


def split(x, d, axis=-1):
    """Split ``x`` along ``axis`` into ``[:d]`` and ``[d:]``."""
    x = as_tensor(x)
    axis = _normalize_axes(axis, x.ndim)[0]
    n = x.shape[axis]
    if not 0 < d < n:
        raise ConfigurationError(f"split: index {d} must lie strictly inside (0, {n})")
    lo = [slice(None)] * x.ndim
    hi = [slice(None)] * x.ndim
    lo[axis] = slice(0, d)
    hi[axis] = slice(d, None)
    lo, hi = tuple(lo), tuple(hi)
    shape, dtype = x.shape, x.dtype

    def route(index):
        def bw(g):
            full = np.zeros(shape, dtype=dtype)
            full[index] = g
            return (full,)
        return bw

    first = make_op(np.ascontiguousarray(x.data[lo]), (x,), route(lo), "split")
    second = make_op(np.ascontiguousarray(x.data[hi]), (x,), route(hi), "split")
    return first, second


def concat(a, b, axis=-1):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim:
        raise ConfigurationError("concat: rank mismatch")
    axis = _normalize_axes(axis, a.ndim)[0]
    for i in range(a.ndim):
        if i != axis and a.shape[i] != b.shape[i]:
            raise ConfigurationError(f"concat: shapes {a.shape} and {b.shape} differ off axis {axis}")
    if a.dtype != b.dtype:
        raise ConfigurationError("concat: dtype mismatch")
    d = a.shape[axis]

    def bw(g):
        lo = [slice(None)] * g.ndim
        hi = [slice(None)] * g.ndim
        lo[axis] = slice(0, d)
        hi[axis] = slice(d, None)
        return g[tuple(lo)], g[tuple(hi)]

    return make_op(np.concatenate([a.data, b.data], axis=axis), (a, b), bw, "concat")


def reshape(x, shape):
    x = as_tensor(x)
    shape = tuple(int(n) for n in shape)
    if -1 in shape:
        known = -math.prod(shape)
        if known <= 0 or x.size % known:
            raise ConfigurationError(f"reshape: cannot infer extent for {shape} from {x.shape}")
        shape = tuple(x.size // known if n == -1 else n for n in shape)
    if math.prod(shape) != x.size:
        raise ConfigurationError(f"reshape: {x.shape} has {x.size} elements, {shape} needs {math.prod(shape)}")
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def expand(x, shape):
    """Explicit broadcast of ``x`` to ``shape`` (numpy rules); gradients are summed back."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ConfigurationError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    old = x.shape
    lead = len(shape) - len(old)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(old) if n == 1 and shape[lead + i] != 1)

    def bw(g):
        return (g.sum(axis=axes).reshape(old) if axes else g,)

    return make_op(out, (x,), bw, "expand")


def add_bias(x, b):
    """``x[N, F, ...] + b[F]`` with ``b`` broadcast along the non-feature axes."""
    x, b = as_tensor(x), as_tensor(b)
    shape = (1, b.shape[0]) + (1,) * (x.ndim - 2)
    return add(x, expand(reshape(b, shape), x.shape))
