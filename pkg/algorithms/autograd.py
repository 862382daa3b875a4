import threading
from typing import Callable, List, Optional, Sequence

import numpy as np

from utils.errors import ContractError

_state = threading.local()


class Tensor:
    """
    A numpy array with an optional gradient slot.

    Tensors created by the caller with requires_grad=True are leaves: backward
    accumulates into their `.grad`. Tensors produced by recorded ops carry
    gradients only transiently during backward.
    """

    __array_priority__ = 100

    def __init__(self, value, requires_grad=False, name=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.is_leaf = True

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self):
        return Tensor(self.value)

    def zero_grad(self):
        self.grad = None

    def item(self):
        return float(self.value)

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, rows):
        return gather_rows(self, rows)

    def __repr__(self):
        flag = ', requires_grad' if self.requires_grad else ''
        return f"Tensor(shape={self.value.shape}, dtype={self.value.dtype}{flag})"


class TapeNode:
    __slots__ = ('op', 'out', 'parents', 'backward')

    def __init__(self, op: str, out: Tensor, parents: Sequence[Tensor], backward: Callable):
        self.op = op
        self.out = out
        self.parents = tuple(parents)
        self.backward = backward


class Tape:
    """
    Records differentiable ops executed inside `with Tape() as tape:`.

    One tape is active per thread. Node order is fixed at record time, so
    reverse iteration is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self._previous = None

    def __enter__(self):
        self._previous = getattr(_state, 'tape', None)
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = self._previous
        self._previous = None
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return getattr(_state, 'tape', None)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float)):
        # 0-d f32 so python constants never upcast f32 features
        return Tensor(np.asarray(x, dtype=np.float32))
    return Tensor(np.asarray(x))


def record(op, value, parents, backward_fn):
    """
    Wrap `value` as the output of op `op`.

    A node is recorded only when a tape is active and some parent needs a
    gradient; `backward_fn(grad_out)` must return one gradient (or None) per parent.
    """
    tape = active_tape()
    out = Tensor(value)
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.is_leaf = False
        tape.nodes.append(TapeNode(op, out, parents, backward_fn))
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def backward(tape: Tape, loss: Tensor):
    """
    Reverse-mode sweep from scalar `loss` over the nodes of `tape`.

    Leaf tensors reachable from the loss receive dLoss/dLeaf added to their
    `.grad`; calling twice without zeroing doubles the gradients.

    Raises:
        ContractError: loss is not a scalar
    """
    if loss.value.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.value)}
    if loss.is_leaf:
        loss.grad = grads[id(loss)] if loss.grad is None else loss.grad + grads[id(loss)]
        return

    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(np.asarray(pg), parent.value.shape)
            if parent.is_leaf:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record('add', a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record('sub', a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record('mul', av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record('div', av / bv, (a, b), lambda g: (g / bv, -g * av / (bv * bv)))


def square(x):
    x = as_tensor(x)
    xv = x.value
    return record('square', xv * xv, (x,), lambda g: (2.0 * g * xv,))


def absolute(x):
    x = as_tensor(x)
    xv = x.value
    return record('abs', np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return record('exp', out, (x,), lambda g: (g * out,))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return record('sigmoid', out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.value)
    return record('tanh', out, (x,), lambda g: (g * (1.0 - out * out),))


def silu(x):
    x = as_tensor(x)
    xv = x.value
    s = 0.5 * (1.0 + np.tanh(0.5 * xv))
    return record('silu', xv * s, (x,), lambda g: (g * s * (1.0 + xv * (1.0 - s)),))


def scale(x, factor):
    """Multiply by a python/numpy constant without recording the constant"""
    x = as_tensor(x)
    return record('scale', x.value * factor, (x,), lambda g: (g * factor,))


# ---------------------------------------------------------------- reductions

def sum_all(x):
    x = as_tensor(x)
    shape = x.value.shape
    return record('sum', np.asarray(x.value.sum()), (x,), lambda g: (np.broadcast_to(g, shape),))


def mean_all(x):
    x = as_tensor(x)
    shape = x.value.shape
    n = max(1, x.value.size)
    return record('mean', np.asarray(x.value.sum() / n), (x,), lambda g: (np.broadcast_to(g / n, shape),))


def sum_rows(x):
    """Sum over axis 0, keeping the channel axis (1 × C)"""
    x = as_tensor(x)
    rows = x.value.shape[0]
    return record('sum_rows', x.value.sum(axis=0, keepdims=True), (x,),
                  lambda g: (np.repeat(g, rows, axis=0),))


# ------------------------------------------------------------------ structure

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return record('matmul', av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.value.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return record('concat', np.concatenate([t.value for t in tensors], axis=axis), tensors, grad_fn)


def gather_rows(x, rows):
    """x[rows] for an integer index array; gradient scatters back with accumulation"""
    x = as_tensor(x)
    rows = np.asarray(rows)
    n_rows = x.value.shape[0]

    def grad_fn(g):
        full = np.zeros((n_rows,) + g.shape[1:], dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return record('gather', x.value[rows], (x,), grad_fn)


def scatter_rows(x, rows, n_rows):
    """out[rows[i]] += x[i] into an n_rows matrix; the inverse of gather_rows"""
    x = as_tensor(x)
    rows = np.asarray(rows)
    out = np.zeros((n_rows,) + x.value.shape[1:], dtype=x.value.dtype)
    np.add.at(out, rows, x.value)
    return record('scatter', out, (x,), lambda g: (g[rows],))


def row_l2_normalize(x, eps=1e-8):
    x = as_tensor(x)
    xv = x.value
    norm = np.sqrt((xv * xv).sum(axis=1, keepdims=True) + eps)
    out = xv / norm

    def grad_fn(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norm,)

    return record('l2norm', out, (x,), grad_fn)


def slice_cols(x, start, stop):
    x = as_tensor(x)
    shape = x.value.shape

    def grad_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record('slice', x.value[:, start:stop], (x,), grad_fn)
