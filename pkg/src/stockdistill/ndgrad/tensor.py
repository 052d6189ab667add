"""Dense float64 tensors recorded on a reverse-mode differentiation tape.

The engine is deliberately small: rank 0-3 arrays, a fixed set of forward
ops with hand-written gradient rules, and a single-pass backward walk over
the tape in reverse execution order.  Ops compute eagerly with numpy; a
node is recorded only when at least one input lives on a tape, so the same
forward code serves both training (tracked) and evaluation (plain numpy).

Broadcasting is restricted to two cases: a rank-0 scalar against anything,
and a lower-rank operand whose shape is a trailing suffix of the other's
(e.g. a bias of shape [D] against activations of shape [B, D]).  Anything
else raises ShapeError so that dimension bugs fail loudly.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

MAX_RANK = 3

# Names of all differentiable ops, appended at registration time.  The
# gradient-check property suite iterates this to guarantee coverage.
OP_REGISTRY: list[str] = []


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class TapeError(RuntimeError):
    """Tape misuse: backward on a consumed tape, cross-tape ops, etc."""


class ComputeError(ArithmeticError):
    """A forward op produced a non-finite value."""


class Tensor:
    """Immutable dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, values, tape: "Tape | None" = None, tape_id: int | None = None):
        data = np.asarray(values, dtype=np.float64)
        if data.ndim > MAX_RANK:
            raise ShapeError(f"tensor rank {data.ndim} exceeds supported maximum {MAX_RANK}")
        self.data = data
        self.tape = tape
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", tape_id={self.tape_id}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("parents", "backward_fn")

    def __init__(self, parents: tuple[int | None, ...], backward_fn: Callable | None):
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered operation record; execution order is topological order."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._variables: list[int] = []
        self._consumed = False

    @property
    def consumed(self) -> bool:
        return self._consumed

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, values) -> Tensor:
        """Create a tracked leaf that will receive a gradient."""
        tid = self._record((), None)
        self._variables.append(tid)
        return Tensor(values, tape=self, tape_id=tid)

    def _record(self, parents: tuple[int | None, ...], backward_fn) -> int:
        if self._consumed:
            raise TapeError("tape already consumed by backward; build a new tape")
        self._nodes.append(_Node(parents, backward_fn))
        return len(self._nodes) - 1


def constant(values) -> Tensor:
    """An untracked tensor; receives no gradient."""
    return Tensor(values)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _find_tape(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for t in inputs:
        if t.tape is None:
            continue
        if tape is None:
            tape = t.tape
        elif tape is not t.tape:
            raise TapeError("operands live on different tapes")
    return tape


def _apply(op_name: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Finish an op: guard finiteness, record on tape when tracked."""
    if not np.all(np.isfinite(data)):
        raise ComputeError(f"op '{op_name}' produced non-finite values")
    tape = _find_tape(inputs)
    if tape is None:
        return Tensor(data)
    parents = tuple(t.tape_id if t.tape is tape else None for t in inputs)
    tid = tape._record(parents, backward_fn)
    return Tensor(data, tape=tape, tape_id=tid)


def _register(name: str) -> str:
    OP_REGISTRY.append(name)
    return name


# ---------------------------------------------------------------------------
# elementwise arithmetic (suffix broadcasting)

def _broadcast_shape(op: str, sa: tuple, sb: tuple) -> tuple:
    if sa == sb or sb == ():
        return sa
    if sa == ():
        return sb
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise ShapeError(f"op '{op}': shapes {sa} and {sb} are not suffix-broadcastable")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


_register("add")

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _apply("add", a.data + b.data, (a, b), backward)


_register("sub")

def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return _apply("sub", a.data - b.data, (a, b), backward)


_register("mul")

def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape("mul", a.shape, b.shape)
    da, db = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g * db, sa), _unbroadcast(g * da, sb)

    return _apply("mul", da * db, (a, b), backward)


_register("scale")

def scale(x, c: float) -> Tensor:
    x = _lift(x)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _apply("scale", x.data * c, (x,), backward)


# ---------------------------------------------------------------------------
# matrix products

_register("matmul")

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': incompatible shapes {a.shape} and {b.shape}")
    da, db = a.data, b.data

    def backward(g):
        return g @ db.T, da.T @ g

    return _apply("matmul", da @ db, (a, b), backward)


_register("batched_matmul")

def batched_matmul(a, b) -> Tensor:
    """Matmul over a leading batch axis; either side may be an unbatched 2-D
    matrix shared across the batch (its gradient sums over the batch)."""
    a, b = _lift(a), _lift(b)
    na, nb = a.data.ndim, b.data.ndim
    da, db = a.data, b.data
    if na == 3 and nb == 3:
        if da.shape[0] != db.shape[0] or da.shape[2] != db.shape[1]:
            raise ShapeError(f"op 'batched_matmul': incompatible shapes {a.shape} and {b.shape}")

        def backward(g):
            return g @ db.transpose(0, 2, 1), da.transpose(0, 2, 1) @ g

    elif na == 2 and nb == 3:
        if da.shape[1] != db.shape[1]:
            raise ShapeError(f"op 'batched_matmul': incompatible shapes {a.shape} and {b.shape}")

        def backward(g):
            ga = np.einsum("bnm,bkm->nk", g, db)
            return ga, da.T @ g

    elif na == 3 and nb == 2:
        if da.shape[2] != db.shape[0]:
            raise ShapeError(f"op 'batched_matmul': incompatible shapes {a.shape} and {b.shape}")

        def backward(g):
            B, n, m = g.shape
            gb = da.reshape(B * n, -1).T @ g.reshape(B * n, m)
            return g @ db.T, gb

    else:
        raise ShapeError(f"op 'batched_matmul': need rank-3 operands (one may be rank-2), "
                         f"got {a.shape} and {b.shape}")
    return _apply("batched_matmul", da @ db, (a, b), backward)


# ---------------------------------------------------------------------------
# nonlinearities

_register("relu")

def relu(x) -> Tensor:
    x = _lift(x)
    mask = x.data > 0.0  # subgradient at 0 is 0

    def backward(g):
        return (g * mask,)

    return _apply("relu", np.where(mask, x.data, 0.0), (x,), backward)


_register("leaky_relu")

def leaky_relu(x, alpha: float = 0.2) -> Tensor:
    x = _lift(x)
    mask = x.data > 0.0

    def backward(g):
        return (g * np.where(mask, 1.0, alpha),)

    return _apply("leaky_relu", np.where(mask, x.data, alpha * x.data), (x,), backward)


_register("sigmoid")

def sigmoid(x) -> Tensor:
    x = _lift(x)
    s = expit(x.data)

    def backward(g):
        return (g * s * (1.0 - s),)

    return _apply("sigmoid", s, (x,), backward)


_register("tanh")

def tanh(x) -> Tensor:
    x = _lift(x)
    t = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - t * t),)

    return _apply("tanh", t, (x,), backward)


_register("exp")

def exp(x) -> Tensor:
    x = _lift(x)
    with np.errstate(over="ignore"):
        e = np.exp(x.data)

    def backward(g):
        return (g * e,)

    return _apply("exp", e, (x,), backward)


_register("log")

def log(x) -> Tensor:
    x = _lift(x)
    d = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(d)

    def backward(g):
        return (g / d,)

    return _apply("log", out, (x,), backward)


# ---------------------------------------------------------------------------
# softmax family

def _norm_axis(axis: int, ndim: int) -> int:
    a = axis if axis >= 0 else ndim + axis
    if not 0 <= a < ndim:
        raise ShapeError(f"axis {axis} out of range for rank-{ndim} tensor")
    return a


_register("softmax")

def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    ax = _norm_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=ax, keepdims=True)
        return (s * (g - inner),)

    return _apply("softmax", s, (x,), backward)


_register("log_softmax")

def log_softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    ax = _norm_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    p = np.exp(ls)

    def backward(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _apply("log_softmax", ls, (x,), backward)


# ---------------------------------------------------------------------------
# reductions and rearrangers

def _axes_tuple(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (_norm_axis(axis, ndim),)
    return tuple(sorted(_norm_axis(a, ndim) for a in axis))


def _expand(grad: np.ndarray, shape: tuple, axes: tuple[int, ...]) -> np.ndarray:
    g = grad
    for a in axes:
        g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


_register("reduce_sum")

def reduce_sum(x, axis=None) -> Tensor:
    x = _lift(x)
    shape = x.shape
    axes = _axes_tuple(axis, x.data.ndim)

    def backward(g):
        return (_expand(g, shape, axes).copy(),)

    return _apply("reduce_sum", x.data.sum(axis=axes), (x,), backward)


_register("reduce_mean")

def reduce_mean(x, axis=None) -> Tensor:
    x = _lift(x)
    shape = x.shape
    axes = _axes_tuple(axis, x.data.ndim)
    count = int(np.prod([shape[a] for a in axes])) if shape else 1

    def backward(g):
        return (_expand(g, shape, axes) / count,)

    return _apply("reduce_mean", x.data.mean(axis=axes), (x,), backward)


_register("concat")

def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    if not ts:
        raise ShapeError("op 'concat': need at least one tensor")
    ax = _norm_axis(axis, ts[0].data.ndim)
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=ax))

    return _apply("concat", np.concatenate([t.data for t in ts], axis=ax), ts, backward)


_register("reshape")

def reshape(x, shape) -> Tensor:
    x = _lift(x)
    old = x.shape
    new = tuple(int(s) for s in shape)
    if len(new) > MAX_RANK:
        raise ShapeError(f"op 'reshape': target rank {len(new)} exceeds maximum {MAX_RANK}")
    if int(np.prod(new, dtype=np.int64)) != x.data.size:
        raise ShapeError(f"op 'reshape': cannot reshape {old} to {new}")

    def backward(g):
        return (g.reshape(old),)

    return _apply("reshape", x.data.reshape(new), (x,), backward)


_register("transpose")

def transpose(x, axes=None) -> Tensor:
    x = _lift(x)
    nd = x.data.ndim
    perm = tuple(range(nd))[::-1] if axes is None else tuple(_norm_axis(a, nd) for a in axes)
    if sorted(perm) != list(range(nd)):
        raise ShapeError(f"op 'transpose': invalid axes {axes} for rank-{nd} tensor")
    inv = tuple(np.argsort(perm))

    def backward(g):
        return (g.transpose(inv),)

    return _apply("transpose", x.data.transpose(perm), (x,), backward)


_register("gather_rows")

def gather_rows(x, indices) -> Tensor:
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError(f"op 'gather_rows': indices must be 1-D, got shape {idx.shape}")
    if x.data.ndim < 1:
        raise ShapeError("op 'gather_rows': input must have rank >= 1")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"op 'gather_rows': index out of range for first axis {x.shape[0]}")
    shape = x.shape

    def backward(g):
        acc = np.zeros(shape)
        np.add.at(acc, idx, g)
        return (acc,)

    return _apply("gather_rows", x.data[idx], (x,), backward)


# ---------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> dict[int, Tensor]:
    """Accumulate d(loss)/d(variable) for every tape variable reached.

    Returns a map from the variable's tape handle to its gradient tensor.
    Each tape supports exactly one backward pass.
    """
    if loss.tape is None:
        raise TapeError("backward needs a tracked scalar; this tensor is not on a tape")
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape._consumed:
        raise TapeError("backward already ran on this tape")
    tape._consumed = True

    nodes = tape._nodes
    grads: list[np.ndarray | None] = [None] * len(nodes)
    grads[loss.tape_id] = np.ones(())
    for nid in range(len(nodes) - 1, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(g)
        for pid, pg in zip(node.parents, parent_grads):
            if pid is None or pg is None:
                continue
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
        grads[nid] = None  # free activation gradient early

    return {vid: Tensor(grads[vid]) for vid in tape._variables if grads[vid] is not None}
