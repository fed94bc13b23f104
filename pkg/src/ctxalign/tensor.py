"""Minimal dense-array engine with recorded forward ops and exact reverse-mode
gradients.

Tensors hold double-precision row-major data. When built through a Tape, every
operation is recorded so that ``backward`` can replay the graph in reverse and
accumulate exact gradients for all leaf inputs. Shapes are limited to rank 0-2;
broadcasting is restricted to a per-row (n,1) or per-column (1,n) vector
against a matrix.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Rank or dimension mismatch between operands."""


class NumericError(ArithmeticError):
    """An operation would produce a non-finite or domain-invalid value."""


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} produced non-finite values")


class Tensor:
    """Immutable dense array, optionally recorded on a tape.

    Attributes:
        data: numpy float64 array (rank 0, 1 or 2).
        tape: owning Tape, or None for free constants.
        node_id: position in the tape's node list, or None.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        """Flat row-major copy of the stored values."""
        return self.data.reshape(-1).copy()

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()) if self.data.ndim == 0 else self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={list(self.data.shape)}, node_id={self.node_id})"


def build(shape, values):
    """Build a free (tape-less) tensor from a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    n = 1
    for s in shape:
        if s < 0:
            raise ShapeError(f"negative dimension in shape {list(shape)}")
        n *= s
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size != n:
        raise ShapeError(
            f"shape {list(shape)} needs {n} values, got {values.size}")
    _check_finite(values, "build")
    return Tensor(values.reshape(shape))


class Tape:
    """Ordered record of operations; insertion order is a valid topological
    order, so backward traverses the node list once, in reverse.

    Single-threaded: one tape must never be mutated from two threads.
    """

    def __init__(self):
        # each node: (parent_ids, backward_fn) where backward_fn(g) returns
        # one gradient array per parent
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, data):
        """Record an input tensor whose gradient will be reported."""
        t = Tensor(data)
        _check_finite(t.data, "leaf")
        t.tape = self
        t.node_id = self._record([], None)
        return t

    def _record(self, parent_ids, backward_fn):
        self._nodes.append((list(parent_ids), backward_fn))
        return len(self._nodes) - 1

    def _adopt(self, data, parents, backward_fn):
        t = Tensor(data)
        t.tape = self
        t.node_id = self._record([p.node_id for p in parents], backward_fn)
        return t


def _tape_of(*tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ValueError("operands recorded on different tapes")
            tape = t.tape
    return tape


def _result(data, op_name, recorded_parents, backward_fn):
    """Wrap an op result, recording it if any parent lives on a tape.

    recorded_parents must all be on the tape (free constants contribute no
    gradient and are excluded by the caller).
    """
    _check_finite(data, op_name)
    tape = _tape_of(*recorded_parents) if recorded_parents else None
    if tape is None:
        return Tensor(data)
    return tape._adopt(data, recorded_parents, backward_fn)


def matmul(a, b):
    """Matrix product of two rank-2 tensors."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul requires rank-2 operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions {a.shape} x {b.shape} disagree")
    A, B = a.data, b.data

    def bwd(g):
        return [g @ B.T, A.T @ g]

    return _result(A @ B, "matmul", [a, b], bwd)


_UNARY_KINDS = ("exp", "log", "neg", "scale", "offset", "relu")


def apply_unary(t, kind, c=None):
    """Elementwise unary op: exp, log, neg, scale(c), offset(c), relu."""
    if kind not in _UNARY_KINDS:
        raise ValueError(f"unknown unary kind {kind!r}")
    x = t.data
    if kind == "exp":
        with np.errstate(over="ignore"):
            out = np.exp(x)
        def bwd(g, out=out):
            return [g * out]
    elif kind == "log":
        if np.any(x <= 0):
            raise NumericError("log of a non-positive entry")
        out = np.log(x)
        def bwd(g, x=x):
            return [g / x]
    elif kind == "neg":
        out = -x
        def bwd(g):
            return [-g]
    elif kind == "scale":
        if c is None:
            raise ValueError("scale requires a constant")
        out = x * float(c)
        def bwd(g, c=float(c)):
            return [g * c]
    elif kind == "offset":
        if c is None:
            raise ValueError("offset requires a constant")
        out = x + float(c)
        def bwd(g):
            return [g]
    else:  # relu
        out = np.maximum(x, 0.0)
        def bwd(g, x=x):
            return [g * (x > 0)]
    return _result(out, kind, [t], bwd)


def exp(t):
    return apply_unary(t, "exp")


def log(t):
    return apply_unary(t, "log")


def neg(t):
    return apply_unary(t, "neg")


def scale(t, c):
    return apply_unary(t, "scale", c)


def offset(t, c):
    return apply_unary(t, "offset", c)


def relu(t):
    return apply_unary(t, "relu")


def _broadcast_ok(ashape, bshape):
    """b may equal a, or be an (m,1)/(1,n) vector against matrix a."""
    if ashape == bshape:
        return True
    if len(ashape) == 2 and len(bshape) == 2:
        m, n = ashape
        if bshape == (m, 1) or bshape == (1, n):
            return True
    return False


def _unbroadcast(g, shape):
    """Sum gradient g down to the broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == (g.shape[0], 1):
        return g.sum(axis=1, keepdims=True)
    if shape == (1, g.shape[1]):
        return g.sum(axis=0, keepdims=True)
    raise ShapeError(f"cannot reduce gradient {g.shape} to {shape}")


_BINARY_KINDS = ("add", "sub", "mul", "div")


def apply_binary(a, b, kind):
    """Elementwise binary op with restricted per-row/per-column broadcast."""
    if kind not in _BINARY_KINDS:
        raise ValueError(f"unknown binary kind {kind!r}")
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")
    x, y = a.data, b.data
    if kind == "add":
        out = x + y
        def bwd(g, ys=y.shape):
            return [g, _unbroadcast(g, ys)]
    elif kind == "sub":
        out = x - y
        def bwd(g, ys=y.shape):
            return [g, _unbroadcast(-g, ys)]
    elif kind == "mul":
        out = x * y
        def bwd(g, x=x, y=y):
            return [g * y, _unbroadcast(g * x, y.shape)]
    else:  # div
        if np.any(y == 0):
            raise NumericError("division by a zero entry")
        out = x / y
        def bwd(g, x=x, y=y):
            return [g / y, _unbroadcast(-g * x / (y * y), y.shape)]
    return _result(out, kind, [a, b], bwd)


def add(a, b):
    return apply_binary(a, b, "add")


def sub(a, b):
    return apply_binary(a, b, "sub")


def mul(a, b):
    return apply_binary(a, b, "mul")


def div(a, b):
    return apply_binary(a, b, "div")


_AXES = {"rows": 1, "cols": 0, "all": None}
_REDUCE_KINDS = ("sum", "max", "min", "mean")


def reduce(t, axis, kind):
    """Reduce a matrix per row ('rows' -> (n,1)), per column ('cols' ->
    (1,n)) or to a scalar ('all').

    max/min backward routes the incoming gradient to the first attaining
    index along the reduced extent.
    """
    if axis not in _AXES:
        raise ValueError(f"unknown axis {axis!r}")
    if kind not in _REDUCE_KINDS:
        raise ValueError(f"unknown reduce kind {kind!r}")
    orig_shape = t.data.shape
    x = t.data
    if x.ndim != 2:
        x = x.reshape(1, -1) if x.ndim == 1 else x.reshape(1, 1)
    if x.size == 0 or (axis == "rows" and x.shape[1] == 0) or (
            axis == "cols" and x.shape[0] == 0):
        raise ShapeError("reduction over a zero-length axis")
    ax = _AXES[axis]
    shape = x.shape

    if kind in ("sum", "mean"):
        out = x.sum(axis=ax, keepdims=ax is not None)
        count = x.size if ax is None else shape[ax]
        if kind == "mean":
            out = out / count

        def bwd(g, shape=shape, ax=ax, orig=orig_shape,
                factor=(1.0 / count if kind == "mean" else 1.0)):
            grad = np.broadcast_to(np.asarray(g), shape).astype(np.float64) * factor
            return [grad.reshape(orig)]
    else:
        if ax is None:
            flat = x.reshape(-1)
            idx = int(np.argmax(flat) if kind == "max" else np.argmin(flat))
            out = flat[idx]

            def bwd(g, shape=shape, idx=idx, orig=orig_shape):
                grad = np.zeros(shape, dtype=np.float64).reshape(-1)
                grad[idx] = float(np.asarray(g))
                return [grad.reshape(orig)]
        else:
            idx = np.argmax(x, axis=ax) if kind == "max" else np.argmin(x, axis=ax)
            out = np.take_along_axis(x, np.expand_dims(idx, ax), axis=ax)

            def bwd(g, shape=shape, ax=ax, idx=idx, orig=orig_shape):
                grad = np.zeros(shape, dtype=np.float64)
                np.put_along_axis(grad, np.expand_dims(idx, ax),
                                  np.asarray(g).reshape(np.expand_dims(idx, ax).shape),
                                  axis=ax)
                return [grad.reshape(orig)]
    if ax is None:
        out = np.float64(out).reshape(())
    return _result(out, f"{kind}.{axis}", [t], bwd)


def l2_normalize_rows(t, guard=1e-12):
    """Divide each row by (its Euclidean norm + guard); differentiable.

    The guard keeps zero rows at zero and the backward pass finite.
    """
    if guard <= 0:
        raise ValueError("guard must be > 0")
    x = t.data
    if x.ndim != 2:
        raise ShapeError("l2_normalize_rows requires a rank-2 tensor")
    norm = np.sqrt((x * x).sum(axis=1, keepdims=True))
    ng = norm + guard
    out = x / ng

    def bwd(g, x=x, norm=norm, ng=ng):
        # y = x / (|x| + guard); d|x|/dx = x/|x| (0 at x = 0)
        dot = (g * x).sum(axis=1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        radial = np.where(norm > 0, dot / (ng * ng * safe), 0.0)
        return [g / ng - x * radial]

    return _result(out, "l2_normalize_rows", [t], bwd)


def backward(loss, tape=None):
    """Reverse-accumulate gradients of a recorded scalar.

    Returns a map node_id -> flat gradient array covering every recorded
    tensor that the loss depends on.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError("backward requires a scalar loss")
    if loss.tape is None or loss.node_id is None:
        raise ValueError("loss tensor is not recorded on a tape")
    if tape is not None and tape is not loss.tape:
        raise ValueError("loss is not recorded on the given tape")
    tape = loss.tape

    grads = {loss.node_id: np.ones_like(loss.data)}
    for nid in range(loss.node_id, -1, -1):
        g = grads.get(nid)
        if g is None:
            continue
        parents, bwd = tape._nodes[nid]
        if bwd is None:
            continue
        parent_grads = bwd(g)
        for pid, pg in zip(parents, parent_grads):
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = np.array(pg, dtype=np.float64, copy=True)
    return {nid: g.reshape(-1) for nid, g in grads.items()}


def grad_check(f, x, step=1e-5):
    """Compare f's analytic gradient against central finite differences.

    f maps a flat parameter vector to (scalar value, flat analytic gradient).
    Returns the max relative error with denominator max(1, |a|, |n|).
    """
    if step <= 0:
        raise ValueError("step must be > 0")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.size != x.size:
        raise ShapeError("analytic gradient size mismatch")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += step
        fp, _ = f(xp)
        xm = x.copy()
        xm[i] -= step
        fm, _ = f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("f returned a non-finite value during grad_check")
        numeric = (fp - fm) / (2.0 * step)
        denom = max(1.0, abs(analytic[i]), abs(numeric))
        worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
