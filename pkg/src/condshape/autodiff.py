"""Small reverse-mode automatic differentiation over numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients. Node ids come from
a global counter, so sorting by id gives a topological order; :class:`Tape`
collects the sub-graph feeding a scalar and replays it backwards.

All data is float64. Index-valued results (``reduce_min_with_index``) are
plain integer arrays and carry no gradient.
"""
from __future__ import annotations

import itertools
import struct
from pathlib import Path

import numpy as np

_ids = itertools.count()


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.id = next(_ids)
        self.name = name

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn) -> Tensor:
    live = [p for p in parents if p.requires_grad]
    if not live:
        return Tensor(data)
    return Tensor(data, True, parents, backward_fn)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape(a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x) -> Tensor:
    x = _wrap(x)
    mask = x.data > 0
    return _node(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sqrt(x) -> Tensor:
    """Square root with subgradient 0 at 0 (keeps Chamfer finite at coincident points)."""
    x = _wrap(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt of a negative value")
    out = np.sqrt(x.data)
    safe = np.where(out > 0, out, 1.0)
    return _node(out, (x,), lambda g: (np.where(out > 0, g * 0.5 / safe, 0.0),))


def square(x) -> Tensor:
    x = _wrap(x)
    return _node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


# -- linear algebra and shape --------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul of {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), backward)


def transpose(x, axes=None) -> Tensor:
    x = _wrap(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward)


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = _wrap(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def _select_along(x: Tensor, axis: int, idx: np.ndarray) -> Tensor:
    """Pick ``x[..., idx, ...]`` along ``axis`` with the reduced axis removed."""
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return _node(out, (x,), backward)


def reduce_min_with_index(x, axis=-1):
    """Minimum along ``axis`` and its argmin (lowest index on ties).

    The indices are constants of the forward pass; the gradient flows only
    to the selected entries.
    """
    x = _wrap(x)
    axis = axis % x.ndim
    idx = np.argmin(x.data, axis=axis)
    return _select_along(x, axis, idx), idx


def reduce_max(x, axis=-1) -> Tensor:
    """Maximum along ``axis``; gradient goes to the lowest maximising index."""
    x = _wrap(x)
    axis = axis % x.ndim
    return _select_along(x, axis, np.argmax(x.data, axis=axis))


def gather(x, indices, axis=0) -> Tensor:
    x = _wrap(x)
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    out = np.take(x.data, indices, axis=axis)

    def backward(g):
        grad = np.zeros_like(x.data)
        moved = np.moveaxis(grad, axis, 0)
        g_moved = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, g_moved)
        return (grad,)

    return _node(out, (x,), backward)


def index_select(x, index) -> Tensor:
    """Basic/advanced numpy indexing with scatter-add backward."""
    x = _wrap(x)
    out = x.data[index]

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _node(np.array(out), (x,), backward)


def sqdist_matrix(a, b) -> Tensor:
    """Pairwise squared distances between point sets ``(..., N, 3)`` and ``(..., M, 3)``."""
    a, b = _wrap(a), _wrap(b)
    if a.shape[-1] != b.shape[-1] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"sqdist_matrix of {a.shape} and {b.shape}")
    diff = a.data[..., :, None, :] - b.data[..., None, :, :]
    out = np.einsum("...ijk,...ijk->...ij", diff, diff)

    def backward(g):
        w = 2.0 * g[..., None] * diff
        return w.sum(axis=-2), -w.sum(axis=-3)

    return _node(out, (a, b), backward)


# -- backward ------------------------------------------------------------------

class Tape:
    """The recorded sub-graph that produced ``output``, in topological order."""

    def __init__(self, output: Tensor):
        seen, stack, nodes = set(), [output], []
        while stack:
            node = stack.pop()
            if node.id in seen or not node.requires_grad:
                continue
            seen.add(node.id)
            nodes.append(node)
            stack.extend(node.parents)
        nodes.sort(key=lambda n: n.id)
        self.output = output
        self.nodes = nodes

    def backward(self, seed=None) -> dict:
        out = self.output
        grads = {out.id: np.ones_like(out.data) if seed is None else np.asarray(seed, np.float64)}
        for node in reversed(self.nodes):
            g = grads.get(node.id)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
        return grads


def backward(loss: Tensor) -> dict:
    """Gradients of scalar ``loss`` for every leaf that requires grad, keyed by node id."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    return Tape(loss).backward()


def grad(loss: Tensor, wrt) -> list:
    """Gradients of ``loss`` with respect to each tensor in ``wrt`` (zeros when unreachable)."""
    g = backward(loss)
    return [g.get(t.id, np.zeros_like(t.data)) for t in wrt]


def input_gradient(f, z) -> np.ndarray:
    """``d f(z).sum() / dz`` with every other tensor held constant."""
    z_leaf = Tensor(np.array(_wrap(z).data), requires_grad=True)
    out = f(z_leaf)
    return grad(reduce_sum(out), [z_leaf])[0]


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSPK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict) -> None:
    """Flat binary table of named float64 tensors (little-endian)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(value.data if isinstance(value, Tensor) else value, dtype="<f8")
        key = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(key)) + key)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    return out
