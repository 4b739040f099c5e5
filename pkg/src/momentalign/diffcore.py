"""Dense-matrix computation substrate with reverse-mode gradients.

Every value is a 2-D float64 numpy array in row-major order. Operations
build a graph of DiffNode objects; calling backward() on a 1x1 output
populates gradients for every reachable node. Summation-sensitive kernels
(matrix multiply, row means, norms) accumulate left-to-right in row-major
order so that runs are bit-reproducible and small cases agree exactly with
naive loop oracles.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the operation's domain (e.g. log of <= 0)."""


class NonScalarOutputError(ValueError):
    """backward() requires a 1x1 output node."""


class BackwardStateError(RuntimeError):
    """backward() was called twice on the same output without a reset."""


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(1, -1)
    elif a.ndim != 2:
        raise ShapeMismatchError(f"expected a matrix, got array of ndim {a.ndim}")
    return np.ascontiguousarray(a)


class DiffNode:
    """One node of the computation graph: a matrix value plus provenance."""

    __slots__ = ("value", "grad", "op", "_parents", "_vjp", "_fwd", "_done")

    def __init__(self, value, parents=(), vjp=None, fwd=None, op="leaf"):
        self.value = value
        self.grad = None
        self.op = op
        self._parents = parents
        self._vjp = vjp
        self._fwd = fwd
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffNode(op={self.op!r}, shape={self.value.shape})"


def leaf(x, op="leaf") -> DiffNode:
    """Wrap an array as a graph input."""
    return DiffNode(_as_value(x), op=op)


def constant(x) -> DiffNode:
    """Alias of leaf(); constants still receive (unused) gradients."""
    return leaf(x, op="const")


def _node(x) -> DiffNode:
    return x if isinstance(x, DiffNode) else leaf(x)


# ---------------------------------------------------------------------------
# fixed-order kernels

def matmul_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated over the inner index left to right.

    np.add.accumulate is sequential, so the result is bit-identical to the
    naive i/j/k triple loop with k innermost; BLAS-backed np.dot may reorder
    sums and is not used.
    """
    m, n = a.shape
    n2, p = b.shape
    if n != n2:
        raise ShapeMismatchError(f"matmul: inner dims differ, {a.shape} x {b.shape}")
    if n == 1:
        return a * b
    if m == 1:
        prods = a[0, :, None] * b
        return np.add.accumulate(prods, axis=0)[-1:]
    if p == 1:
        prods = a * b[:, 0]
        return np.add.accumulate(prods, axis=1)[:, -1:]
    prods = a.T[:, :, None] * b[:, None, :]
    return np.add.accumulate(prods, axis=0)[-1]


def ordered_sum_rows(a: np.ndarray) -> np.ndarray:
    """Sum of rows accumulated top to bottom; 1 x cols result."""
    if a.shape[0] == 1:
        return a.copy()
    return np.add.accumulate(a, axis=0)[-1:]


def _ordered_total(a: np.ndarray) -> float:
    """Sum of all entries in row-major order."""
    flat = a.ravel()
    if flat.shape[0] == 1:
        return float(flat[0])
    return float(np.add.accumulate(flat)[-1])


# ---------------------------------------------------------------------------
# broadcasting helpers (b may be 1x1, a row vector, or a column vector)

def _broadcast_ok(sa, sb):
    if sa == sb:
        return True
    if sb == (1, 1):
        return True
    if sb[0] == 1 and sb[1] == sa[1]:
        return True
    if sb[1] == 1 and sb[0] == sa[0]:
        return True
    return False


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to the broadcast operand's shape."""
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[g.sum()]])
    if shape[0] == 1:
        return g.sum(axis=0, keepdims=True)
    return g.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# operations

def add(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeMismatchError(f"add: shapes {a.value.shape} and {b.value.shape}")

    def fwd():
        return a.value + b.value

    out = DiffNode(fwd(), (a, b), fwd=fwd, op="add")

    def vjp(g):
        a.grad += g
        b.grad += _reduce_to(g, b.value.shape)

    out._vjp = vjp
    return out


def sub(a, b) -> DiffNode:
    return add(a, scale(b, -1.0))


def mul(a, b) -> DiffNode:
    """Elementwise product; b may broadcast as in add()."""
    a, b = _node(a), _node(b)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeMismatchError(f"mul: shapes {a.value.shape} and {b.value.shape}")

    def fwd():
        return a.value * b.value

    out = DiffNode(fwd(), (a, b), fwd=fwd, op="mul")

    def vjp(g):
        a.grad += g * b.value
        b.grad += _reduce_to(g * a.value, b.value.shape)

    out._vjp = vjp
    return out


def divide(a, b) -> DiffNode:
    """Elementwise quotient; raises DomainError on zero denominators."""
    a, b = _node(a), _node(b)
    if not _broadcast_ok(a.value.shape, b.value.shape):
        raise ShapeMismatchError(f"divide: shapes {a.value.shape} and {b.value.shape}")
    if np.any(b.value == 0.0):
        raise DomainError("divide: zero entry in denominator")

    def fwd():
        return a.value / b.value

    out = DiffNode(fwd(), (a, b), fwd=fwd, op="divide")

    def vjp(g):
        a.grad += g / b.value
        b.grad += _reduce_to(-g * out.value / b.value, b.value.shape)

    out._vjp = vjp
    return out


def scale(a, c: float) -> DiffNode:
    a = _node(a)
    c = float(c)

    def fwd():
        return a.value * c

    out = DiffNode(fwd(), (a,), fwd=fwd, op="scale")

    def vjp(g):
        a.grad += g * c

    out._vjp = vjp
    return out


def matmul(a, b) -> DiffNode:
    a, b = _node(a), _node(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatchError(
            f"matmul: inner dims differ, {a.value.shape} x {b.value.shape}"
        )

    def fwd():
        return matmul_values(a.value, b.value)

    out = DiffNode(fwd(), (a, b), fwd=fwd, op="matmul")

    def vjp(g):
        a.grad += matmul_values(g, b.value.T)
        b.grad += matmul_values(a.value.T, g)

    out._vjp = vjp
    return out


def transpose(a) -> DiffNode:
    a = _node(a)

    def fwd():
        return np.ascontiguousarray(a.value.T)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="transpose")

    def vjp(g):
        a.grad += g.T

    out._vjp = vjp
    return out


def concat_cols(nodes) -> DiffNode:
    nodes = [_node(n) for n in nodes]
    if not nodes:
        raise ShapeMismatchError("concat_cols: empty input list")
    rows = nodes[0].value.shape[0]
    for n in nodes:
        if n.value.shape[0] != rows:
            raise ShapeMismatchError(
                f"concat_cols: row counts differ, {nodes[0].value.shape} vs {n.value.shape}"
            )
    widths = [n.value.shape[1] for n in nodes]

    def fwd():
        return np.concatenate([n.value for n in nodes], axis=1)

    out = DiffNode(fwd(), tuple(nodes), fwd=fwd, op="concat_cols")

    def vjp(g):
        off = 0
        for n, w in zip(nodes, widths):
            n.grad += g[:, off : off + w]
            off += w

    out._vjp = vjp
    return out


def concat_rows(nodes) -> DiffNode:
    nodes = [_node(n) for n in nodes]
    if not nodes:
        raise ShapeMismatchError("concat_rows: empty input list")
    cols = nodes[0].value.shape[1]
    for n in nodes:
        if n.value.shape[1] != cols:
            raise ShapeMismatchError(
                f"concat_rows: col counts differ, {nodes[0].value.shape} vs {n.value.shape}"
            )
    heights = [n.value.shape[0] for n in nodes]

    def fwd():
        return np.concatenate([n.value for n in nodes], axis=0)

    out = DiffNode(fwd(), tuple(nodes), fwd=fwd, op="concat_rows")

    def vjp(g):
        off = 0
        for n, h in zip(nodes, heights):
            n.grad += g[off : off + h, :]
            off += h

    out._vjp = vjp
    return out


def slice_rows(a, start: int, stop: int) -> DiffNode:
    a = _node(a)
    rows = a.value.shape[0]
    if not (0 <= start < stop <= rows):
        raise ShapeMismatchError(f"slice_rows: [{start}:{stop}] out of range for {a.value.shape}")

    def fwd():
        return a.value[start:stop, :].copy()

    out = DiffNode(fwd(), (a,), fwd=fwd, op="slice_rows")

    def vjp(g):
        a.grad[start:stop, :] += g

    out._vjp = vjp
    return out


def gather_rows(a, indices) -> DiffNode:
    """Select rows by index (repeats allowed); gradients scatter-add back."""
    a = _node(a)
    idx = np.asarray(indices, dtype=np.intp).ravel()
    rows = a.value.shape[0]
    if idx.size == 0:
        raise ShapeMismatchError("gather_rows: empty index list")
    if idx.min() < 0 or idx.max() >= rows:
        raise ShapeMismatchError(f"gather_rows: index out of range for {a.value.shape}")

    def fwd():
        return a.value[idx, :]

    out = DiffNode(fwd(), (a,), fwd=fwd, op="gather_rows")

    def vjp(g):
        np.add.at(a.grad, idx, g)

    out._vjp = vjp
    return out


def row_softmax(a) -> DiffNode:
    """Softmax over each row, computed with max subtraction."""
    a = _node(a)

    def fwd():
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="row_softmax")

    def vjp(g):
        s = out.value
        a.grad += s * (g - (g * s).sum(axis=1, keepdims=True))

    out._vjp = vjp
    return out


def mean_over_rows(a) -> DiffNode:
    a = _node(a)
    rows = a.value.shape[0]

    def fwd():
        return ordered_sum_rows(a.value) / rows

    out = DiffNode(fwd(), (a,), fwd=fwd, op="mean_over_rows")

    def vjp(g):
        a.grad += np.repeat(g / rows, rows, axis=0)

    out._vjp = vjp
    return out


def std_over_rows(a) -> DiffNode:
    """Population standard deviation per column (divide by row count)."""
    a = _node(a)
    rows = a.value.shape[0]

    def fwd():
        m = ordered_sum_rows(a.value) / rows
        sq = (a.value - m) ** 2
        return np.sqrt(ordered_sum_rows(sq) / rows)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="std_over_rows")

    def vjp(g):
        m = ordered_sum_rows(a.value) / rows
        s = out.value
        safe = np.where(s > 0.0, s, 1.0)
        coeff = np.where(s > 0.0, g / (rows * safe), 0.0)
        a.grad += (a.value - m) * coeff

    out._vjp = vjp
    return out


def l2_norm(a) -> DiffNode:
    """Euclidean norm of all entries (Frobenius norm for matrices); 1x1 output.

    Gradient at the zero matrix is defined as zero.
    """
    a = _node(a)

    def fwd():
        return np.array([[np.sqrt(_ordered_total(a.value * a.value))]])

    out = DiffNode(fwd(), (a,), fwd=fwd, op="l2_norm")

    def vjp(g):
        n = out.value[0, 0]
        if n > 0.0:
            a.grad += (g[0, 0] / n) * a.value

    out._vjp = vjp
    return out


def row_norms(a) -> DiffNode:
    """Euclidean norm of each row; rows x 1 output. Zero rows get zero gradient."""
    a = _node(a)

    def fwd():
        sq = a.value * a.value
        if sq.shape[1] == 1:
            return np.sqrt(sq.copy())
        return np.sqrt(np.add.accumulate(sq, axis=1)[:, -1:])

    out = DiffNode(fwd(), (a,), fwd=fwd, op="row_norms")

    def vjp(g):
        n = out.value
        safe = np.where(n > 0.0, n, 1.0)
        a.grad += np.where(n > 0.0, g / safe, 0.0) * a.value

    out._vjp = vjp
    return out


def sqrt(a) -> DiffNode:
    """Elementwise square root; gradient at zero is defined as zero."""
    a = _node(a)
    if np.any(a.value < 0.0):
        raise DomainError("sqrt: negative entry")

    def fwd():
        return np.sqrt(a.value)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="sqrt")

    def vjp(g):
        y = out.value
        a.grad += np.where(y > 0.0, g / (2.0 * np.where(y > 0.0, y, 1.0)), 0.0)

    out._vjp = vjp
    return out


def exp(a) -> DiffNode:
    a = _node(a)

    def fwd():
        return np.exp(a.value)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="exp")

    def vjp(g):
        a.grad += g * out.value

    out._vjp = vjp
    return out


def log(a) -> DiffNode:
    a = _node(a)
    if np.any(a.value <= 0.0):
        raise DomainError("log: non-positive entry")

    def fwd():
        return np.log(a.value)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="log")

    def vjp(g):
        a.grad += g / a.value

    out._vjp = vjp
    return out


def tanh(a) -> DiffNode:
    a = _node(a)

    def fwd():
        return np.tanh(a.value)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="tanh")

    def vjp(g):
        a.grad += g * (1.0 - out.value * out.value)

    out._vjp = vjp
    return out


def sigmoid(a) -> DiffNode:
    a = _node(a)

    def fwd():
        # split by sign to avoid overflow in exp
        v = a.value
        out_v = np.empty_like(v)
        pos = v >= 0
        out_v[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out_v[~pos] = ev / (1.0 + ev)
        return out_v

    out = DiffNode(fwd(), (a,), fwd=fwd, op="sigmoid")

    def vjp(g):
        s = out.value
        a.grad += g * s * (1.0 - s)

    out._vjp = vjp
    return out


def max_over_axis(a, axis: int) -> DiffNode:
    """Max along an axis (0 -> 1 x cols, 1 -> rows x 1); ties route the
    gradient to the lowest index."""
    a = _node(a)
    if axis not in (0, 1):
        raise ShapeMismatchError(f"max_over_axis: axis must be 0 or 1, got {axis}")

    def fwd():
        m = a.value.max(axis=axis)
        return m.reshape(1, -1) if axis == 0 else m.reshape(-1, 1)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="max_over_axis")

    def vjp(g):
        idx = a.value.argmax(axis=axis)
        if axis == 0:
            for j in range(a.value.shape[1]):
                a.grad[idx[j], j] += g[0, j]
        else:
            for i in range(a.value.shape[0]):
                a.grad[i, idx[i]] += g[i, 0]

    out._vjp = vjp
    return out


def hinge(a) -> DiffNode:
    """Elementwise max(0, x); subgradient 0 at x == 0."""
    a = _node(a)

    def fwd():
        return np.maximum(a.value, 0.0)

    out = DiffNode(fwd(), (a,), fwd=fwd, op="hinge")

    def vjp(g):
        a.grad += g * (a.value > 0.0)

    out._vjp = vjp
    return out


def abs_value(a) -> DiffNode:
    """|x| composed from the hinge op; subgradient 0 at x == 0."""
    return add(hinge(a), hinge(scale(a, -1.0)))


def sum_all(a) -> DiffNode:
    """Row-major ordered total of all entries as a 1x1 node."""
    a = _node(a)

    def fwd():
        return np.array([[_ordered_total(a.value)]])

    out = DiffNode(fwd(), (a,), fwd=fwd, op="sum_all")

    def vjp(g):
        a.grad += g[0, 0]

    out._vjp = vjp
    return out


# ---------------------------------------------------------------------------
# backward pass

def _topo_order(output: DiffNode):
    order = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node in seen:
            continue
        seen.add(node)
        stack.append((node, True))
        for p in node._parents:
            if p not in seen:
                stack.append((p, False))
    return order


def backward(output: DiffNode):
    """Populate .grad on every node reachable from a 1x1 output."""
    if output.value.shape != (1, 1):
        raise NonScalarOutputError(f"backward: output shape is {output.value.shape}, need (1, 1)")
    if output._done:
        raise BackwardStateError("backward: already called on this output; rebuild the graph")
    output._done = True
    order = _topo_order(output)
    for node in order:
        node.grad = np.zeros(node.value.shape)
    output.grad[0, 0] = 1.0
    for node in reversed(order):
        if node._vjp is not None:
            node._vjp(node.grad)


def reevaluate(order) -> None:
    """Recompute values along a topological order (for finite differencing)."""
    for node in order:
        if node._fwd is not None:
            node.value = node._fwd()


def grad_check(build, h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    `build` takes a numpy Generator and returns (output_node, [leaf nodes]).
    The relative error uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    if not (0.0 < h <= 1e-3):
        raise DomainError(f"grad_check: perturbation {h} outside (0, 1e-3]")
    rng = np.random.default_rng(seed)
    output, leaves = build(rng)
    order = _topo_order(output)
    backward(output)
    analytic = [lf.grad.copy() for lf in leaves]

    worst = 0.0
    for lf, an in zip(leaves, analytic):
        flat = lf.value.ravel()
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + h
            reevaluate(order)
            f_plus = output.value[0, 0]
            flat[i] = keep - h
            reevaluate(order)
            f_minus = output.value[0, 0]
            flat[i] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = an.ravel()[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    reevaluate(order)
    return worst
