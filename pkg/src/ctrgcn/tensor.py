"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation returns a fresh :class:`Tensor`.  When gradient recording is
enabled and at least one input requires a gradient, the result carries a
:class:`Node` that remembers its parents and a closure mapping the output
gradient to input gradients.  Node ids come from a global counter, so sorting
the reachable nodes by id is a valid topological order; :class:`Tape` does
exactly that and is consumed by a single backward pass.
"""

import contextlib
import itertools
import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_node_ids = itertools.count()
_grad_enabled = True

# Optional multiply-accumulate counter, see ``count_macs``.
_mac_counter: Optional[list] = None


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def count_macs():
    """Count matmul multiply-accumulates executed inside the block.

    Yields a one-element list whose entry is updated in place.
    """
    global _mac_counter
    previous = _mac_counter
    _mac_counter = [0]
    try:
        yield _mac_counter
    finally:
        _mac_counter = previous


class Node:
    """One recorded operation on the tape."""

    __slots__ = ("id", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.id = next(_node_ids)
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r})"


class Tensor:
    """A dense n-dimensional float64 array with an optional gradient slot.

    ``data`` is a C-contiguous numpy array, so its flat view is the row-major
    buffer.  Leaves created with ``requires_grad=True`` get a zero gradient
    that :func:`backward` accumulates into.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, node: Optional[Node] = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = node
        self.grad = np.zeros_like(arr) if (self.requires_grad and node is None) else None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operator sugar --------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def backward(self):
        backward(self)


def as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def create(shape: Sequence[int], fill=0.0, requires_grad: bool = False) -> Tensor:
    """Build a tensor of ``shape`` from a scalar fill or a flat/nested array."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"shape dims must be positive, got {shape}")
    count = math.prod(shape)
    if np.isscalar(fill):
        data = np.full(shape, float(fill))
    else:
        flat = np.asarray(fill, dtype=np.float64).ravel()
        if flat.size != count:
            raise DimensionError(
                f"shape {shape} needs {count} values, got {flat.size}"
            )
        data = flat.reshape(shape)
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _record(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, node=Node(op, parents, backward_fn))
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} do not broadcast") from None


# -- elementwise arithmetic ---------------------------------------------

def ewise(op: str, a, b) -> Tensor:
    """Broadcasting elementwise ``add``, ``sub``, ``mul`` or ``div``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape)
    x, y = a.data, b.data
    if op == "add":
        out = x + y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)
    elif op == "sub":
        out = x - y

        def bw(g):
            return _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)
    elif op == "mul":
        out = x * y

        def bw(g):
            return _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)
    elif op == "div":
        out = x / y

        def bw(g):
            return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)
    else:
        raise ContractError(f"unknown elementwise op {op!r}")
    return _record(out, (a, b), bw, op)


def add(a, b) -> Tensor:
    return ewise("add", a, b)


def sub(a, b) -> Tensor:
    return ewise("sub", a, b)


def mul(a, b) -> Tensor:
    return ewise("mul", a, b)


def div(a, b) -> Tensor:
    return ewise("div", a, b)


def power(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = x ** exponent

    def bw(g):
        return (g * exponent * x ** (exponent - 1),)

    return _record(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,), "log")


# -- activations ---------------------------------------------------------

def activation(kind: str, x: Tensor) -> Tensor:
    """Apply ``tanh``, ``sigmoid``, ``relu`` or ``softmax_lastdim``."""
    v = x.data
    if kind == "tanh":
        out = np.tanh(v)

        def bw(g):
            return (g * (1.0 - out * out),)
    elif kind == "sigmoid":
        out = 0.5 * (1.0 + np.tanh(0.5 * v))

        def bw(g):
            return (g * out * (1.0 - out),)
    elif kind == "relu":
        mask = v > 0
        out = np.where(mask, v, 0.0)

        def bw(g):
            return (g * mask,)
    elif kind == "softmax_lastdim":
        shifted = np.exp(v - v.max(axis=-1, keepdims=True))
        out = shifted / shifted.sum(axis=-1, keepdims=True)

        def bw(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)
    else:
        raise ContractError(f"unknown activation {kind!r}")
    return _record(out, (x,), bw, kind)


def tanh(x):
    return activation("tanh", x)


def sigmoid(x):
    return activation("sigmoid", x)


def relu(x):
    return activation("relu", x)


def softmax(x):
    return activation("softmax_lastdim", x)


def log_softmax(x: Tensor) -> Tensor:
    """Numerically stable log-softmax over the last axis."""
    v = x.data
    shifted = v - v.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=-1, keepdims=True),)

    return _record(out, (x,), bw, "log_softmax")


# -- linear algebra --------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes broadcast as in numpy."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    lead = _broadcast_shape(x.shape[:-2], y.shape[:-2])
    if x.ndim > 2 or y.ndim > 2:
        # stacked products only reach BLAS with contiguous operands
        x, y = np.ascontiguousarray(x), np.ascontiguousarray(y)
    out = np.matmul(x, y)
    if _mac_counter is not None:
        _mac_counter[0] += math.prod(lead) * x.shape[-2] * x.shape[-1] * y.shape[-1]

    def bw(g):
        if g.ndim > 2:
            g = np.ascontiguousarray(g)
        ga = np.matmul(g, np.ascontiguousarray(np.swapaxes(y, -1, -2))) if a.requires_grad else None
        gb = np.matmul(np.ascontiguousarray(np.swapaxes(x, -1, -2)), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, x.shape),
            None if gb is None else _unbroadcast(gb, y.shape),
        )

    return _record(out, (a, b), bw, "matmul")


def batch_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Slice-wise product of ``[..., m, k]`` and ``[..., k, n]`` with equal batch axes."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"batch axes differ: {a.shape} vs {b.shape}")
    return matmul(a, b)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` along the last axis of ``x``."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(
            f"channel axis {x.shape[-1]} does not match weight {weight.shape}"
        )
    lead = x.shape[:-1]
    out = matmul(reshape(x, (-1, x.shape[-1])), weight)
    if bias is not None:
        out = add(out, bias)
    return reshape(out, lead + (weight.shape[1],))


# -- reductions and shape ops ----------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, (int, np.integer)) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """``sum``, ``mean`` or ``max`` over ``axis`` (int, tuple or None)."""
    axes = _normalize_axes(axis, x.ndim)
    v = x.data
    if kind == "sum":
        out = v.sum(axis=axes, keepdims=keepdims)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(g, v.shape).copy(),)
    elif kind == "mean":
        count = math.prod(v.shape[a] for a in axes)
        out = v.mean(axis=axes, keepdims=keepdims)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            return (np.broadcast_to(g / count, v.shape).copy(),)
    elif kind == "max":
        full = v.max(axis=axes, keepdims=True)
        out = full if keepdims else np.squeeze(full, axis=axes)

        def bw(g):
            g = g if keepdims else np.expand_dims(g, axes)
            mask = v == full
            return (mask * (g / mask.sum(axis=axes, keepdims=True)),)
    else:
        raise ContractError(f"unknown reduction {kind!r}")
    return _record(np.asarray(out), (x,), bw, kind)


def reshape(x: Tensor, shape) -> Tensor:
    v = x.data
    try:
        out = v.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {v.shape} into {shape}") from None
    return _record(out, (x,), lambda g: (g.reshape(v.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"bad permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _record(out, (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if _broadcast_shape(x.shape, shape) != shape:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}")
    v = x.data
    out = np.broadcast_to(v, shape).copy()
    return _record(out, (x,), lambda g: (_unbroadcast(g, v.shape),), "broadcast_to")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(x: Tensor, index) -> Tensor:
    v = x.data
    out = np.array(v[index])
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros_like(v)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record(out, (x,), bw, "getitem")


def pad(x: Tensor, widths, value: float = 0.0) -> Tensor:
    """Constant-pad with ``widths`` given per axis as ``(before, after)``."""
    widths = tuple(tuple(int(w) for w in pair) for pair in widths)
    if len(widths) != x.ndim:
        raise DimensionError(f"need {x.ndim} pad pairs, got {len(widths)}")
    out = np.pad(x.data, widths, mode="constant", constant_values=value)
    window = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return _record(out, (x,), lambda g: (g[window],), "pad")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other dims must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = _normalize_axes(axis, ndim)[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[d] != ref[d] for d in range(ndim) if d != axis
        ):
            raise DimensionError(f"cannot concat {ref} with {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(out, tuple(tensors), bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(t, tuple(shape)))
    return concat(expanded, axis=axis)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Inverse of :func:`concat` for the given section sizes."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    parts, start = [], 0
    for n in sizes:
        index = [slice(None)] * x.ndim
        index[axis] = slice(start, start + n)
        parts.append(getitem(x, tuple(index)))
        start += n
    return parts


# -- backward ----------------------------------------------------------------

class Tape:
    """Nodes reachable from one output, in topological (id) order."""

    def __init__(self, output: Tensor):
        self.output = output
        nodes = {}
        stack_ = [output]
        seen = set()
        while stack_:
            t = stack_.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            if node.consumed:
                raise ContractError(
                    f"tape already consumed at {node!r}; re-run the forward pass"
                )
            seen.add(node.id)
            nodes[node.id] = t
            stack_.extend(node.parents)
        self.entries = [nodes[i] for i in sorted(nodes)]

    def __len__(self):
        return len(self.entries)

    def run(self, seed: np.ndarray):
        grads = {id(self.output): seed}
        for t in reversed(self.entries):
            node = t.node
            g = grads.pop(id(t), None)
            if g is not None:
                for parent, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    if parent.node is None:
                        parent.grad = parent.grad + pg if parent.grad is not None else pg.copy()
                    else:
                        key = id(parent)
                        grads[key] = grads[key] + pg if key in grads else pg
            node.consumed = True
            node.backward_fn = None


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
            return
        raise ContractError("loss is not connected to any recorded operation")
    Tape(loss).run(np.ones_like(loss.data))


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``f`` is called with no arguments and must rebuild its graph each call.
    The relative error of one element is ``|a - n| / (max(|a|, |n|) + 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"eps {eps} outside [1e-7, 1e-4]")
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = f().item()
                flat[i] = orig - eps
                down = f().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * eps)
                a = gflat[i]
                err = abs(a - numeric) / (max(abs(a), abs(numeric)) + 1e-8)
                worst = max(worst, err)
    for p in params:
        p.zero_grad()
    return worst
