"""Dense float64 tensors with reverse-mode differentiation.

Every op appends a node whose creation index is strictly larger than the
indices of its inputs, so sorting the reachable nodes by creation index
gives a valid topological order. ``backward`` walks that order in reverse.
"""

from __future__ import annotations

import itertools
import struct
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, FormatError, LabelError

_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_id = next(_counter)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self.name = name

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
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None):
        backward(self, grad)

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
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return NotImplemented

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Record an op result. ``backward_fn(g)`` returns one grad (or None) per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.tape_id = next(_counter)
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(root: Tensor, grad=None):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if grad is None:
        if root.size != 1:
            raise DimensionError(f"backward needs a scalar root or explicit grad, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != root.shape:
        raise DimensionError(f"seed grad shape {grad.shape} != root shape {root.shape}")

    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in nodes or not t.requires_grad:
            continue
        nodes[id(t)] = t
        stack.extend(t._parents)
    order = sorted(nodes.values(), key=lambda t: t.tape_id, reverse=True)

    grads = {id(root): grad}
    for t in order:
        g = grads.pop(id(t), None)
        if t._backward is None:
            # leaf
            if g is None:
                g = np.zeros_like(t.data)
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


@contextmanager
def record_kinks():
    """Collect the activation pattern of every relu evaluated in the block.

    Yields a list that receives one boolean array per relu call; comparing
    patterns between two evaluations tells whether a perturbation crossed a
    kink.
    """
    prev = getattr(_state, "kinks", None)
    _state.kinks = log = []
    try:
        yield log
    finally:
        _state.kinks = prev


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    log = getattr(_state, "kinks", None)
    if log is not None:
        log.append(pos)
    return make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def _sigmoid_backward(y, g):
    return g * y * (1.0 - y)


def sigmoid(a: Tensor) -> Tensor:
    y = stable_sigmoid(a.data)
    return make(y, (a,), lambda g: (_sigmoid_backward(y, g),))


def stable_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make(np.log(ad), (a,), lambda g: (g / ad,))


def straight_through(soft: Tensor, threshold: float = 0.5) -> Tensor:
    """Forward ``1[soft >= threshold]``; backward passes the gradient unchanged."""
    hard = (soft.data >= threshold).astype(np.float64)
    return make(hard, (soft,), lambda g: (g,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return make(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    cuts = np.cumsum(sizes)[:-1]
    return make(out, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    try:
        out = ad @ bd
    except ValueError:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned") from None
    return make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """``x @ w + b``; a 1-D ``x`` is treated as a single row."""
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, x.shape[0])), w), (w.shape[1],))
    else:
        y = matmul(x, w)
    return y if b is None else add(y, b)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise DimensionError(f"log_softmax: empty axis {axis} for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)
    return make(out, (x,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """``-log softmax(logits)[label]``; batched input returns the batch mean."""
    labels = np.asarray(labels)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
        labels = labels.reshape(1)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if not np.issubdtype(labels.dtype, np.integer) or labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise LabelError(f"cross_entropy: labels must be integers in 0..{k - 1}")
    n = logits.shape[0]
    lsm = log_softmax(logits, axis=1)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = -1.0 / n
    return tsum(mul(lsm, onehot))


# ---------------------------------------------------------------- serialization

def write_tensor(fh, arr) -> None:
    """Little-endian: uint32 rank, uint64 extents, float64 row-major values."""
    arr = np.ascontiguousarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray:
    start = fh.tell()
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError(f"truncated tensor header at byte {start}")
    (rank,) = struct.unpack("<I", head)
    if rank > 16:
        raise FormatError(f"implausible tensor rank {rank} at byte {start}")
    raw = fh.read(8 * rank)
    if len(raw) != 8 * rank:
        raise FormatError(f"truncated tensor extents at byte {start + 4}")
    shape = struct.unpack(f"<{rank}Q", raw)
    count = int(np.prod(shape)) if rank else 1
    body = fh.read(8 * count)
    if len(body) != 8 * count:
        raise FormatError(f"truncated tensor data at byte {start + 4 + 8 * rank}")
    return np.frombuffer(body, dtype="<f8").reshape(shape).astype(np.float64)


def parameters_of(tensors: Iterable[Tensor]) -> list:
    return [t for t in tensors if t.requires_grad]
