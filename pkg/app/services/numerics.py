"""
Numerics service for the entity classification package.
A small dense-tensor engine on top of numpy with a reverse-mode gradient tape.

Every op builds its output through `_result`, which records a tape node when
gradients are enabled and any input requires them. `backward` replays the
tape in reverse creation order, which is a topological order of the graph.
"""

import logging
import threading
from contextlib import contextmanager

import numpy as np

from app.utils.errors import InvalidInputError, InvalidMaskError, InvalidShapeError

logger = logging.getLogger(__name__)

_local = threading.local()


class Tape:
    """Ordered record of differentiable results. One writer per tape."""

    def __init__(self):
        self.nodes = []

    def record(self, tensor):
        tensor.node_id = len(self.nodes)
        self.nodes.append(tensor)

    def clear(self):
        for node in self.nodes:
            node.node_id = None
        self.nodes = []

    def __len__(self):
        return len(self.nodes)


def current_tape():
    """The calling thread's tape (created on first use)."""
    tape = getattr(_local, 'tape', None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled():
    return getattr(_local, 'enabled', True)


@contextmanager
def no_grad():
    """Disable tape recording in this thread."""
    previous = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = previous


@contextmanager
def recording(tape=None):
    """Record onto a fresh (or given) tape for the duration of the block."""
    previous = getattr(_local, 'tape', None)
    _local.tape = tape if tape is not None else Tape()
    try:
        yield _local.tape
    finally:
        _local.tape = previous


class Tensor:
    """Dense real array with an optional gradient slot."""

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        array = np.asarray(data, dtype=dtype)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data = array
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.parents = ()
        self.backward_fn = None
        self.node_id = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self.backward_fn is None

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float('nan')

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ''
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other, like=self), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, name=None, dtype=None):
    """Leaf tensor that receives gradients."""
    return Tensor(np.array(data, dtype=dtype, copy=True), requires_grad=True, name=name)


def as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
        current_tape().record(out)
    return out


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise InvalidShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'add')

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, 'mul')

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward_fn)


def scale(a, factor):
    a = as_tensor(a)
    factor = float(factor)

    def backward_fn(g):
        return (g * factor,)

    return _result(a.data * factor, (a,), backward_fn)


def matmul(a, b):
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise InvalidShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), backward_fn)


def _parse_einsum(subscripts):
    if '...' in subscripts or '->' not in subscripts:
        raise InvalidInputError(f"einsum: explicit output without ellipsis required, got {subscripts!r}")
    inputs, out = subscripts.replace(' ', '').split('->')
    parts = inputs.split(',')
    if len(parts) != 2:
        raise InvalidInputError(f"einsum: exactly two operands supported, got {subscripts!r}")
    for part in parts + [out]:
        if len(set(part)) != len(part):
            raise InvalidInputError(f"einsum: repeated index inside one operand in {subscripts!r}")
    return parts[0], parts[1], out


def _einsum_grad(g, out, other_subs, other, own_subs, own_shape):
    available = set(out) | set(other_subs)
    keep = ''.join(c for c in own_subs if c in available)
    reduced = np.einsum(f"{out},{other_subs}->{keep}", g, other)
    if keep == own_subs:
        return reduced
    shape = [own_shape[i] if c in keep else 1 for i, c in enumerate(own_subs)]
    return np.broadcast_to(reduced.reshape(shape), own_shape).copy()


def einsum(subscripts, a, b):
    """
    Two-operand Einstein summation, e.g. einsum('ihd,jhd->hij', q, k).

    Indices may not repeat inside one operand; an index that appears in only
    one operand and not in the output is summed.
    """
    sa, sb, out = _parse_einsum(subscripts)
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != len(sa) or b.ndim != len(sb):
        raise InvalidShapeError(f"einsum {subscripts!r}: operand ranks {a.shape}, {b.shape}")
    try:
        data = np.einsum(f"{sa},{sb}->{out}", a.data, b.data)
    except ValueError as e:
        raise InvalidShapeError(f"einsum {subscripts!r}: {e}") from None

    def backward_fn(g):
        ga = _einsum_grad(g, out, sb, b.data, sa, a.shape) if a.requires_grad else None
        gb = _einsum_grad(g, out, sa, a.data, sb, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), backward_fn)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise InvalidShapeError(f"concat: {e}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tuple(tensors), backward_fn)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise InvalidShapeError(f"reshape: {e}") from None

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result(data, (a,), backward_fn)


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(a.data, axes), (a,), backward_fn)


def sum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward_fn)


def mean(a, axis=None):
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / count)


def masked_fill(x, mask, value=-np.inf):
    """Replace disallowed entries (mask False) by `value`; they get zero gradient."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)

    def backward_fn(g):
        return (np.where(mask, g, 0.0),)

    return _result(np.where(mask, x.data, value), (x,), backward_fn)


def embedding_lookup(table, indices):
    """Gather rows of a 2-D table; output shape is indices.shape + (width,)."""
    table = as_tensor(table)
    indices = np.asarray(indices)
    if table.ndim != 2:
        raise InvalidShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(indices.dtype, np.integer):
        raise InvalidInputError("embedding_lookup: indices must be integers")
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise InvalidInputError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}): {indices.min()}..{indices.max()}"
        )

    def backward_fn(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, indices, g)
        return (grad,)

    return _result(table.data[indices], (table,), backward_fn)


def row_softmax(x, mask=None):
    """
    Softmax over the last axis restricted to allowed entries.

    Disallowed entries are never exponentiated and come out as exactly 0.

    Raises:
        InvalidMaskError: If some row allows no entry
    """
    x = as_tensor(x)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            mask = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise InvalidShapeError(f"row_softmax: mask {mask.shape} does not fit scores {x.shape}") from None
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("row_softmax: a row has no allowed entry")

    scores = np.where(mask, x.data, -np.inf)
    peak = scores.max(axis=-1, keepdims=True)
    weights = np.where(mask, np.exp(scores - peak), 0.0)
    y = weights / weights.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward_fn)


def _log_softmax(data):
    peak = data.max(axis=-1, keepdims=True)
    shifted = data - peak
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_array(data):
    """Plain (non-recorded) softmax over the last axis."""
    return np.exp(_log_softmax(np.asarray(data)))


def log_softmax(x):
    x = as_tensor(x)
    y = _log_softmax(x.data)

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis, then scale by gamma and shift by beta."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise InvalidShapeError(f"layer_norm: gamma/beta must have shape ({width},)")

    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward_fn(g):
        dxhat = g * gamma.data
        dx = inv_std / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward_fn)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """GELU, tanh approximation."""
    x = as_tensor(x)
    v = x.data
    t = np.tanh(_GELU_C * (v + 0.044715 * v ** 3))

    def backward_fn(g):
        dt = (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return _result(0.5 * v * (1.0 + t), (x,), backward_fn)


def cross_entropy(logits, targets):
    """
    Mean cross-entropy of N x C logits against integer class targets.

    Raises:
        InvalidShapeError: If logits are not 2-D or targets do not match N
        InvalidInputError: If a target is out of range
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise InvalidShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n, c = logits.shape
    if n == 0:
        raise InvalidShapeError("cross_entropy: no rows")
    if targets.min() < 0 or targets.max() >= c:
        raise InvalidInputError(f"cross_entropy: targets must lie in [0, {c})")

    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def backward_fn(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward_fn)


def backward(loss, retain_tape=False):
    """
    Reverse-mode pass from a scalar loss.

    Gradients are added into each leaf's `.grad` once per call, so repeated
    calls accumulate (used to emulate batches over ragged documents).

    Args:
        loss (Tensor): Scalar result recorded on the current tape
        retain_tape (bool): Keep the tape for another backward call

    Returns:
        dict: Leaf tensor -> gradient contributed by this call

    Raises:
        InvalidInputError: If the loss is not a scalar
    """
    if loss.data.size != 1:
        raise InvalidInputError(f"backward: loss must be a scalar, got shape {loss.shape}")

    tape = current_tape()
    if not loss.requires_grad:
        return {}
    if loss.node_id is None or loss.node_id >= len(tape) or tape.nodes[loss.node_id] is not loss:
        raise InvalidInputError("backward: loss was not recorded on the current tape")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(tape.nodes[:loss.node_id + 1]):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.is_leaf:
                key = id(parent)
                if key in leaves:
                    leaves[key] = (parent, leaves[key][1] + pg)
                else:
                    leaves[key] = (parent, pg)
            elif id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg

    result = {}
    for parent, g in leaves.values():
        g = np.asarray(g, dtype=parent.data.dtype).reshape(parent.shape)
        parent.grad = g.copy() if parent.grad is None else parent.grad + g
        result[parent] = g

    if not retain_tape:
        tape.clear()
    return result
