"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Values are plain ``numpy.ndarray`` objects in double precision; a scalar is a
0-d array.  Every operation returns a :class:`Node` that records its parents
and a backward closure, so a single :func:`backward` call propagates gradients
through an arbitrary acyclic graph.  Gradients accumulate additively when a
node feeds several consumers.

The primitive set is exactly what the matching model needs: dense linear
algebra, tanh, row softmax, span max-pooling, cosine similarity, cross
entropy, hinge, and a gradient-reversal node (:func:`grl`) whose forward pass
is the identity and whose backward pass multiplies incoming gradients by
``-lam``.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ShapeError",
    "NonFiniteError",
    "leaf",
    "const",
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "matmul",
    "transpose",
    "tanh",
    "softmax",
    "concat",
    "gather_rows",
    "slice_rows",
    "select_row",
    "select_index",
    "max_pool_rows",
    "max_excluding",
    "dot",
    "norm",
    "cosine",
    "cross_entropy",
    "hinge",
    "mean_all",
    "stack_scalars",
    "scalar_mul",
    "div_by_scalar",
    "grl",
    "backward",
    "grad_check",
    "COSINE_NORM_EPS",
]

# Norm regularizer shared by cosine everywhere in the model.
COSINE_NORM_EPS = 1e-12
# Guard for divisions by norms inside backward rules only.
_TINY = 1e-300


class ShapeError(ValueError):
    """Operation rejected because input shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A graph value became NaN or infinite."""


class Node:
    """One vertex of the computation graph.

    ``value`` is a float64 ndarray, ``grad`` is lazily allocated with the same
    shape during :func:`backward`.  Leaves have no parents; constants
    additionally carry ``requires_grad=False`` so backward never touches them.
    """

    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple = (),
        op: str = "leaf",
        backward_fn: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = True,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.parents = parents
        self.op = op
        self.requires_grad = requires_grad
        self._backward = backward_fn

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __add__(self, other):
        if isinstance(other, Node):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def leaf(value) -> Node:
    """Trainable leaf node; validates the all-finite tensor invariant."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("leaf: tensor contains non-finite values")
    return Node(arr, op="leaf")


def const(value) -> Node:
    """Constant node: participates in forward math, excluded from backward."""
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("const: tensor contains non-finite values")
    return Node(arr, op="const", requires_grad=False)


def _accum(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        # Copy: g may alias another node's gradient buffer or a view of one.
        node.grad = np.array(g, dtype=np.float64)
    else:
        node.grad += g


def _requires(*nodes: Node) -> bool:
    return any(n.requires_grad for n in nodes)


def _same_shape(op: str, a: Node, b: Node) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a: Node, b: Node) -> Node:
    _same_shape("add", a, b)
    out = Node(a.value + b.value, (a, b), "add", requires_grad=_requires(a, b))

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    out._backward = bw
    return out


def sub(a: Node, b: Node) -> Node:
    _same_shape("sub", a, b)
    out = Node(a.value - b.value, (a, b), "sub", requires_grad=_requires(a, b))

    def bw(g):
        _accum(a, g)
        _accum(b, -g)

    out._backward = bw
    return out


def mul(a: Node, b: Node) -> Node:
    _same_shape("mul", a, b)
    out = Node(a.value * b.value, (a, b), "mul", requires_grad=_requires(a, b))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.value)
        if b.requires_grad:
            _accum(b, g * a.value)

    out._backward = bw
    return out


def scale(a: Node, c: float) -> Node:
    out = Node(a.value * c, (a,), "scale", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * c)

    out._backward = bw
    return out


def add_scalar(a: Node, c: float) -> Node:
    out = Node(a.value + c, (a,), "add_scalar", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g)

    out._backward = bw
    return out


def matmul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not chain")
        out = Node(av @ bv, (a, b), "matmul", requires_grad=_requires(a, b))

        def bw(g):
            if a.requires_grad:
                _accum(a, g @ bv.T)
            if b.requires_grad:
                _accum(b, av.T @ g)

    elif av.ndim == 2 and bv.ndim == 1:
        if av.shape[1] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not chain")
        out = Node(av @ bv, (a, b), "matmul", requires_grad=_requires(a, b))

        def bw(g):
            if a.requires_grad:
                _accum(a, np.outer(g, bv))
            if b.requires_grad:
                _accum(b, av.T @ g)

    elif av.ndim == 1 and bv.ndim == 2:
        if av.shape[0] != bv.shape[0]:
            raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not chain")
        out = Node(av @ bv, (a, b), "matmul", requires_grad=_requires(a, b))

        def bw(g):
            if a.requires_grad:
                _accum(a, bv @ g)
            if b.requires_grad:
                _accum(b, np.outer(av, g))

    else:
        raise ShapeError(f"matmul: unsupported ranks {av.shape} @ {bv.shape}")
    out._backward = bw
    return out


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {a.value.shape}")
    out = Node(a.value.T.copy(), (a,), "transpose", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g.T)

    out._backward = bw
    return out


def tanh(a: Node) -> Node:
    t = np.tanh(a.value)
    out = Node(t, (a,), "tanh", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * (1.0 - t * t))

    out._backward = bw
    return out


def softmax(a: Node) -> Node:
    """Softmax along the last axis, computed with max-subtraction."""
    if a.value.ndim not in (1, 2):
        raise ShapeError(f"softmax: expected vector or matrix, got shape {a.value.shape}")
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Node(s, (a,), "softmax", requires_grad=a.requires_grad)

    def bw(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(a, s * (g - inner))

    out._backward = bw
    return out


def concat(nodes: Sequence[Node]) -> Node:
    for n in nodes:
        if n.value.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shape {n.value.shape}")
    parts = tuple(nodes)
    out = Node(
        np.concatenate([n.value for n in parts]),
        parts,
        "concat",
        requires_grad=_requires(*parts),
    )
    sizes = [n.value.shape[0] for n in parts]

    def bw(g):
        off = 0
        for n, size in zip(parts, sizes):
            _accum(n, g[off : off + size])
            off += size

    out._backward = bw
    return out


def gather_rows(table: Node, ids: Sequence[int]) -> Node:
    if table.value.ndim != 2:
        raise ShapeError(f"gather_rows: expected matrix, got shape {table.value.shape}")
    idx = np.asarray(ids, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.value.shape[0]):
        raise ShapeError(
            f"gather_rows: index out of range for table shape {table.value.shape}"
        )
    out = Node(table.value[idx], (table,), "gather_rows", requires_grad=table.requires_grad)

    def bw(g):
        if table.requires_grad:
            full = np.zeros_like(table.value)
            np.add.at(full, idx, g)
            _accum(table, full)

    out._backward = bw
    return out


def slice_rows(mat: Node, start: int, stop: int) -> Node:
    if mat.value.ndim != 2:
        raise ShapeError(f"slice_rows: expected matrix, got shape {mat.value.shape}")
    if not (0 <= start < stop <= mat.value.shape[0]):
        raise ShapeError(
            f"slice_rows: range [{start},{stop}) invalid for shape {mat.value.shape}"
        )
    out = Node(mat.value[start:stop].copy(), (mat,), "slice_rows", requires_grad=mat.requires_grad)

    def bw(g):
        if mat.requires_grad:
            full = np.zeros_like(mat.value)
            full[start:stop] = g
            _accum(mat, full)

    out._backward = bw
    return out


def select_row(mat: Node, i: int) -> Node:
    if mat.value.ndim != 2 or not (0 <= i < mat.value.shape[0]):
        raise ShapeError(f"select_row: row {i} invalid for shape {mat.value.shape}")
    out = Node(mat.value[i].copy(), (mat,), "select_row", requires_grad=mat.requires_grad)

    def bw(g):
        if mat.requires_grad:
            full = np.zeros_like(mat.value)
            full[i] = g
            _accum(mat, full)

    out._backward = bw
    return out


def select_index(vec: Node, i: int) -> Node:
    if vec.value.ndim != 1 or not (0 <= i < vec.value.shape[0]):
        raise ShapeError(f"select_index: index {i} invalid for shape {vec.value.shape}")
    out = Node(np.asarray(vec.value[i]), (vec,), "select_index", requires_grad=vec.requires_grad)

    def bw(g):
        if vec.requires_grad:
            full = np.zeros_like(vec.value)
            full[i] = g
            _accum(vec, full)

    out._backward = bw
    return out


def max_pool_rows(mat: Node, start: int, stop: int) -> Node:
    """Elementwise max over rows ``start..stop`` inclusive.

    Backward routes each column's gradient to the argmax row only; ties go to
    the lowest row index.
    """
    if mat.value.ndim != 2 or not (0 <= start <= stop < mat.value.shape[0]):
        raise ShapeError(
            f"max_pool_rows: span [{start},{stop}] invalid for shape {mat.value.shape}"
        )
    block = mat.value[start : stop + 1]
    arg = block.argmax(axis=0)  # first occurrence wins ties
    out = Node(block.max(axis=0), (mat,), "max_pool_rows", requires_grad=mat.requires_grad)
    cols = np.arange(mat.value.shape[1])

    def bw(g):
        if mat.requires_grad:
            full = np.zeros_like(mat.value)
            full[start + arg, cols] = g
            _accum(mat, full)

    out._backward = bw
    return out


def max_excluding(vec: Node, idx: int) -> Node:
    """Max over all entries except ``idx``; ties break to the lowest index."""
    v = vec.value
    if v.ndim != 1 or v.shape[0] < 2:
        raise ShapeError(f"max_excluding: need a vector of length >= 2, got {v.shape}")
    if not (0 <= idx < v.shape[0]):
        raise ShapeError(f"max_excluding: index {idx} invalid for shape {v.shape}")
    masked = v.copy()
    masked[idx] = -np.inf
    j = int(masked.argmax())
    out = Node(np.asarray(v[j]), (vec,), "max_excluding", requires_grad=vec.requires_grad)

    def bw(g):
        if vec.requires_grad:
            full = np.zeros_like(v)
            full[j] = g
            _accum(vec, full)

    out._backward = bw
    return out


def dot(a: Node, b: Node) -> Node:
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeError(f"dot: shapes {a.value.shape} and {b.value.shape} incompatible")
    out = Node(np.asarray(a.value @ b.value), (a, b), "dot", requires_grad=_requires(a, b))

    def bw(g):
        if a.requires_grad:
            _accum(a, g * b.value)
        if b.requires_grad:
            _accum(b, g * a.value)

    out._backward = bw
    return out


def norm(a: Node) -> Node:
    if a.value.ndim != 1:
        raise ShapeError(f"norm: expected vector, got shape {a.value.shape}")
    n = float(np.linalg.norm(a.value))
    out = Node(np.asarray(n), (a,), "norm", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * (a.value / max(n, _TINY)))

    out._backward = bw
    return out


def cosine(a: Node, b: Node) -> Node:
    """Cosine similarity with norms regularized by ``COSINE_NORM_EPS``.

    The backward rule differentiates the regularized expression itself, so a
    zero vector yields a ~0 similarity instead of a division by zero.
    """
    if a.value.ndim != 1 or b.value.ndim != 1 or a.value.shape != b.value.shape:
        raise ShapeError(f"cosine: shapes {a.value.shape} and {b.value.shape} incompatible")
    av, bv = a.value, b.value
    na = float(np.linalg.norm(av))
    nb = float(np.linalg.norm(bv))
    denom = (na + COSINE_NORM_EPS) * (nb + COSINE_NORM_EPS)
    s = float(av @ bv)
    out = Node(np.asarray(s / denom), (a, b), "cosine", requires_grad=_requires(a, b))

    def bw(g):
        if a.requires_grad:
            ga = bv / denom - (s * (nb + COSINE_NORM_EPS) / (denom * denom)) * (
                av / max(na, _TINY)
            )
            _accum(a, g * ga)
        if b.requires_grad:
            gb = av / denom - (s * (na + COSINE_NORM_EPS) / (denom * denom)) * (
                bv / max(nb, _TINY)
            )
            _accum(b, g * gb)

    out._backward = bw
    return out


def cross_entropy(probs: Node, target: int) -> Node:
    """``-log(probs[target])`` against a one-hot target, clamped at 1e-300."""
    v = probs.value
    if v.ndim != 1 or not (0 <= target < v.shape[0]):
        raise ShapeError(f"cross_entropy: target {target} invalid for shape {v.shape}")
    p = max(float(v[target]), 1e-300)
    out = Node(np.asarray(-math.log(p)), (probs,), "cross_entropy", requires_grad=probs.requires_grad)

    def bw(g):
        if probs.requires_grad:
            full = np.zeros_like(v)
            full[target] = -g / p
            _accum(probs, full)

    out._backward = bw
    return out


def hinge(a: Node) -> Node:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = a.value > 0.0
    out = Node(np.where(mask, a.value, 0.0), (a,), "hinge", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * mask)

    out._backward = bw
    return out


def mean_all(a: Node) -> Node:
    size = a.value.size
    if size == 0:
        raise ShapeError("mean_all: empty tensor")
    out = Node(np.asarray(a.value.mean()), (a,), "mean_all", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, np.full_like(a.value, g / size))

    out._backward = bw
    return out


def stack_scalars(nodes: Sequence[Node]) -> Node:
    for n in nodes:
        if n.value.ndim != 0:
            raise ShapeError(f"stack_scalars: expected scalars, got shape {n.value.shape}")
    parts = tuple(nodes)
    out = Node(
        np.array([float(n.value) for n in parts]),
        parts,
        "stack_scalars",
        requires_grad=_requires(*parts),
    )

    def bw(g):
        for i, n in enumerate(parts):
            _accum(n, np.asarray(g[i]))

    out._backward = bw
    return out


def scalar_mul(s: Node, v: Node) -> Node:
    """Multiply a tensor by a scalar node (both differentiable)."""
    if s.value.ndim != 0:
        raise ShapeError(f"scalar_mul: scalar expected, got shape {s.value.shape}")
    sv = float(s.value)
    out = Node(v.value * sv, (s, v), "scalar_mul", requires_grad=_requires(s, v))

    def bw(g):
        if s.requires_grad:
            _accum(s, np.asarray(np.sum(g * v.value)))
        if v.requires_grad:
            _accum(v, g * sv)

    out._backward = bw
    return out


def div_by_scalar(v: Node, s: Node) -> Node:
    """Divide a tensor by a scalar node."""
    if s.value.ndim != 0:
        raise ShapeError(f"div_by_scalar: scalar expected, got shape {s.value.shape}")
    sv = float(s.value)
    out = Node(v.value / sv, (v, s), "div_by_scalar", requires_grad=_requires(v, s))

    def bw(g):
        if v.requires_grad:
            _accum(v, g / sv)
        if s.requires_grad:
            _accum(s, np.asarray(-np.sum(g * v.value) / (sv * sv)))

    out._backward = bw
    return out


def grl(a: Node, lam: float) -> Node:
    """Gradient-reversal node.

    Forward is the identity on values, bit for bit.  Backward multiplies the
    incoming gradient by ``-lam`` before passing it upstream.
    """
    if not (math.isfinite(lam) and lam >= 0.0):
        raise ValueError(f"grl: lambda must be finite and >= 0, got {lam}")
    out = Node(a.value, (a,), "grl", requires_grad=a.requires_grad)

    def bw(g):
        _accum(a, g * (-lam))

    out._backward = bw
    return out


def _topo_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Populate ``grad`` on every node reachable from a scalar loss."""
    if loss.value.ndim != 0:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.value.shape}")
    order = _topo_order(loss)
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None and node.requires_grad:
            node._backward(node.grad)


def first_nonfinite(root: Node) -> Node | None:
    """Return the first graph node (in construction order) with a non-finite value."""
    for node in _topo_order(root):
        if not np.all(np.isfinite(node.value)):
            return node
    return None


def grad_check(
    build: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``build`` must be a pure function mapping a dict of leaf nodes to a scalar
    loss node.  Returns the maximum relative error over every parameter entry:
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.  ``tolerance``
    is advisory for callers; the value is returned either way.
    """
    if step <= 0:
        raise ValueError(f"grad_check: step must be positive, got {step}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: leaf(v) for k, v in base.items()}
    loss = build(leaves)
    if not np.all(np.isfinite(loss.value)):
        bad = first_nonfinite(loss)
        raise NonFiniteError(f"grad_check: non-finite value produced by op {bad.op!r}")
    backward(loss)
    analytic = {
        k: (leaves[k].grad if leaves[k].grad is not None else np.zeros_like(base[k]))
        for k in base
    }

    def eval_at(values: dict[str, np.ndarray]) -> float:
        out = build({k: leaf(v) for k, v in values.items()})
        if not np.all(np.isfinite(out.value)):
            bad = first_nonfinite(out)
            raise NonFiniteError(f"grad_check: non-finite value produced by op {bad.op!r}")
        return float(out.value)

    worst = 0.0
    for name, arr in base.items():
        flat = arr.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            work = {k: v.copy() for k, v in base.items()}
            work[name].reshape(-1)[i] = orig + step
            f_plus = eval_at(work)
            work[name].reshape(-1)[i] = orig - step
            f_minus = eval_at(work)
            numeric = (f_plus - f_minus) / (2.0 * step)
            rel = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-12)
            worst = max(worst, rel)
    return worst
