"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`ValueGraph` records every operation applied to its :class:`Node`
objects in execution order.  :meth:`ValueGraph.backward` walks the tape in
reverse and accumulates vector-Jacobian products into one gradient slot per
node.  Values are plain read-only ``numpy`` arrays.

Broadcasting is deliberately limited: elementwise ops accept two operands of
identical shape, or one operand that is a scalar.  Anything else has to go
through :func:`expand` explicitly.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.linalg import solve_triangular

Tensor = np.ndarray


class DiffMathError(ValueError):
    """Invalid use of a differentiable operation."""


class ShapeError(DiffMathError):
    pass


class DomainError(DiffMathError):
    """Operation evaluated outside its domain (e.g. log of a non-positive value)."""


class NonFiniteError(FloatingPointError):
    """A forward value contains NaN or Inf."""


class NotPositiveDefiniteError(DiffMathError):
    pass


def as_tensor(value) -> Tensor:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


def _check_finite(value: Tensor, op: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced by {op}")


class Node:
    """A value inside a :class:`ValueGraph`."""

    __slots__ = ("graph", "index", "value", "needs_grad", "name", "__weakref__")

    def __init__(self, graph: "ValueGraph", index: int, value: Tensor, needs_grad: bool, name=None):
        self.graph = graph
        self.index = index
        self.value = value
        self.needs_grad = needs_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.index}{label}(shape={self.shape})"

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
        if isinstance(other, Node):
            return div(self, other)
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum_(self, axis)


class _Record:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.op = op


class ValueGraph:
    """Linear tape of operations. Confined to a single thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._records: list[_Record | None] = []
        self.cache: dict = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value: Tensor, needs_grad: bool, record, name=None) -> Node:
        node = Node(self, len(self.nodes), value, needs_grad, name)
        self.nodes.append(node)
        self._records.append(record)
        return node

    def leaf(self, value, name=None) -> Node:
        """Register a differentiable input (parameter or variable)."""
        return self._push(as_tensor(value), True, None, name)

    def constant(self, value, name=None) -> Node:
        return self._push(as_tensor(value), False, None, name)

    def record(self, op: str, value, parents: Sequence[Node], backward: Callable) -> Node:
        """Append the result of a custom operation.

        ``backward(g)`` receives the output gradient and must return one
        gradient (or ``None``) per parent, each shaped like that parent.
        """
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, op)
        value.setflags(write=False)
        for p in parents:
            if p.graph is not self:
                raise DiffMathError(f"{op}: operand belongs to a different graph")
        needs = any(p.needs_grad for p in parents)
        rec = _Record(tuple(parents), backward, op) if needs else None
        return self._push(value, needs, rec)

    def ops(self) -> list[str]:
        return [r.op if r is not None else "leaf" for r in self._records]

    def backward(self, root: Node) -> dict[Node, Tensor]:
        """Gradients of scalar ``root`` with respect to every leaf of the graph."""
        if root.graph is not self:
            raise DiffMathError("root belongs to a different graph")
        if root.size != 1:
            raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.index] = np.ones_like(root.value)
        for i in range(root.index, -1, -1):
            g = grads[i]
            rec = self._records[i]
            if g is None or rec is None:
                continue
            parent_grads = rec.backward(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.needs_grad:
                    continue
                if grads[p.index] is None:
                    grads[p.index] = np.array(pg, dtype=np.float64).reshape(p.shape)
                else:
                    grads[p.index] = grads[p.index] + pg
        out = {}
        for node, rec in zip(self.nodes, self._records):
            if rec is None and node.needs_grad:
                g = grads[node.index]
                out[node] = np.zeros_like(node.value) if g is None else g
        return out


def backward(graph: ValueGraph, root: Node) -> dict[Node, Tensor]:
    return graph.backward(root)


# --------------------------------------------------------------------------
# operand handling

def _graph_of(*operands) -> ValueGraph:
    for x in operands:
        if isinstance(x, Node):
            return x.graph
    raise DiffMathError("at least one operand must be a Node")


def _lift(graph: ValueGraph, x) -> Node:
    if isinstance(x, Node):
        if x.graph is not graph:
            raise DiffMathError("operands belong to different graphs")
        return x
    return graph.constant(x)


def _pair_shapes(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# --------------------------------------------------------------------------
# elementwise

def add(a, b) -> Node:
    gr = _graph_of(a, b)
    a, b = _lift(gr, a), _lift(gr, b)
    _pair_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return gr.record("add", a.value + b.value, (a, b),
                     lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Node:
    gr = _graph_of(a, b)
    a, b = _lift(gr, a), _lift(gr, b)
    _pair_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return gr.record("sub", a.value - b.value, (a, b),
                     lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Node:
    gr = _graph_of(a, b)
    a, b = _lift(gr, a), _lift(gr, b)
    _pair_shapes("mul", a, b)
    av, bv = a.value, b.value
    return gr.record("mul", av * bv, (a, b),
                     lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def div(a, b) -> Node:
    gr = _graph_of(a, b)
    a, b = _lift(gr, a), _lift(gr, b)
    _pair_shapes("div", a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise DomainError("division by zero")
    out = av / bv
    return gr.record("div", out, (a, b),
                     lambda g: (_reduce_to(g / bv, av.shape), _reduce_to(-g * out / bv, bv.shape)))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph.record("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Node) -> Node:
    v = x.value
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return x.graph.record("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Node) -> Node:
    """log(1 + exp(x)), evaluated without overflow."""
    v = x.value
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    s = np.exp(-np.logaddexp(0.0, -v))
    return x.graph.record("softplus", out, (x,), lambda g: (g * s,))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return x.graph.record("exp", out, (x,), lambda g: (g * out,))


def log(x: Node) -> Node:
    v = x.value
    if np.any(v <= 0):
        raise DomainError("log of a non-positive value")
    return x.graph.record("log", np.log(v), (x,), lambda g: (g / v,))


def square(x: Node) -> Node:
    v = x.value
    return x.graph.record("square", v * v, (x,), lambda g: (2.0 * g * v,))


def sqrt(x: Node) -> Node:
    v = x.value
    if np.any(v <= 0):
        raise DomainError("sqrt needs strictly positive input to stay differentiable")
    out = np.sqrt(v)
    return x.graph.record("sqrt", out, (x,), lambda g: (0.5 * g / out,))


def sin(x: Node) -> Node:
    v = x.value
    return x.graph.record("sin", np.sin(v), (x,), lambda g: (g * np.cos(v),))


def cos(x: Node) -> Node:
    v = x.value
    return x.graph.record("cos", np.cos(v), (x,), lambda g: (-g * np.sin(v),))


_POINTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "relu": relu, "sigmoid": sigmoid, "softplus": softplus,
    "exp": exp, "log": log, "square": square, "sqrt": sqrt, "sin": sin, "cos": cos,
}


def pointwise(op: str, *operands) -> Node:
    """Dispatch an elementwise operation by name."""
    try:
        fn = _POINTWISE[op]
    except KeyError:
        raise DiffMathError(f"unknown pointwise op {op!r}") from None
    return fn(*operands)


# --------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Node:
    """Matrix product over the last two axes; leading axes must match exactly."""
    gr = _graph_of(a, b)
    a, b = _lift(gr, a), _lift(gr, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands need at least two dimensions (use reshape for vectors)")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a_lead, b_lead = a.shape[:-2], b.shape[:-2]
    if a_lead and b_lead and a_lead != b_lead:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def back(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        if not a_lead and b_lead:
            ga = ga.reshape(-1, *av.shape).sum(axis=0)
        if not b_lead and a_lead:
            gb = gb.reshape(-1, *bv.shape).sum(axis=0)
        return ga, gb

    return gr.record("matmul", av @ bv, (a, b), back)


def _phi(m: np.ndarray) -> np.ndarray:
    out = np.tril(m)
    idx = np.arange(m.shape[-1])
    out[..., idx, idx] *= 0.5
    return out


def cholesky(sigma: Node) -> Node:
    """Lower Cholesky factor of a (batch of) symmetric positive definite matrices.

    The input is symmetrized before factorization.  The backward rule is the
    triangular-solve form ``S = L^-T Phi(L^T dL) L^-1``, symmetrized.
    """
    v = sigma.value
    if v.ndim < 2 or v.shape[-1] != v.shape[-2]:
        raise ShapeError(f"cholesky needs square matrices, got {v.shape}")
    sym = 0.5 * (v + np.swapaxes(v, -1, -2))
    try:
        L = np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError("non-positive pivot in Cholesky factorization") from None
    if not np.all(np.diagonal(L, axis1=-2, axis2=-1) > 0):
        raise NotPositiveDefiniteError("non-positive pivot in Cholesky factorization")

    def back(g):
        Lf = L.reshape(-1, *L.shape[-2:])
        gf = g.reshape(Lf.shape)
        out = np.empty_like(Lf)
        for i in range(Lf.shape[0]):
            Li = Lf[i]
            P = _phi(Li.T @ gf[i])
            # S = L^-T P L^-1
            tmp = solve_triangular(Li, P.T, lower=True, trans=1).T  # P L^-1
            S = solve_triangular(Li, tmp, lower=True, trans=1)  # L^-T (P L^-1)
            out[i] = 0.5 * (S + S.T)
        return (out.reshape(v.shape),)

    return sigma.graph.record("cholesky", L, (sigma,), back)


# --------------------------------------------------------------------------
# structural

def sum_(x: Node, axis=None) -> Node:
    shape = x.shape
    if axis is None:
        return x.graph.record("sum", np.sum(x.value), (x,),
                              lambda g: (np.broadcast_to(g, shape),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    out = np.sum(x.value, axis=axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape),)

    return x.graph.record("sum", out, (x,), back)


def mean(x: Node, axis=None) -> Node:
    total = sum_(x, axis)
    count = x.size // max(total.size, 1)
    return mul(total, 1.0 / count)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return x.graph.record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Node, axes=None) -> Node:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return x.graph.record("transpose", np.transpose(x.value, axes), (x,),
                          lambda g: (np.transpose(g, inv),))


def expand(x: Node, shape) -> Node:
    """Explicit broadcast of ``x`` to ``shape`` (numpy broadcasting rules)."""
    shape = tuple(shape)
    old = x.shape
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    lead = len(shape) - len(old)

    def back(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(old) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return x.graph.record("expand", out, (x,), back)


def getitem(x: Node, key) -> Node:
    shape = x.shape
    out = x.value[key]

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, key, g)
        return (full,)

    return x.graph.record("getitem", out, (x,), back)


def take(x: Node, indices, axis: int) -> Node:
    """Gather along ``axis`` with an integer index array."""
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    shape = x.shape
    out = np.take(x.value, indices, axis=axis)

    def back(g):
        full = np.zeros(shape)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return x.graph.record("take", out, (x,), back)


def concat(parts: Sequence, axis: int = 0) -> Node:
    gr = _graph_of(*parts)
    nodes = [_lift(gr, p) for p in parts]
    axis = axis % nodes[0].ndim
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([n.value for n in nodes], axis=axis)
    return gr.record("concat", out, nodes, lambda g: tuple(np.split(g, splits, axis=axis)))


def diagonal(x: Node) -> Node:
    """Diagonal of the last two axes."""
    n = x.shape[-1]
    shape = x.shape
    idx = np.arange(n)

    def back(g):
        full = np.zeros(shape)
        full[..., idx, idx] = g
        return (full,)

    return x.graph.record("diagonal", np.diagonal(x.value, axis1=-2, axis2=-1).copy(), (x,), back)


# --------------------------------------------------------------------------
# convolution (cross-correlation, NCHW layout)

def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv_forward(x, w, stride, pad):
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(wd, kw, stride, pad)
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)  # n c ho wo kh kw
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)


def _conv_input_grad(g, w, x_shape, stride, pad):
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    hp, wp = h + 2 * pad, wd + 2 * pad
    hp = max(hp, (ho - 1) * stride + kh)
    wp = max(wp, (wo - 1) * stride + kw)
    full = np.zeros((n, c, hp, wp))
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)  # (n ho wo) x o
    contrib = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return full[:, :, pad : pad + h, pad : pad + wd]


def _conv_weight_grad(x, g, w_shape, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w_shape
    ho, wo = g.shape[2], g.shape[3]
    win = _windows(_pad(x, pad), kh, kw, stride, ho, wo)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (gm.T @ cols).reshape(w_shape)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Node:
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,kh,kw)."""
    gr = _graph_of(x, w)
    x, w = _lift(gr, x), _lift(gr, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if w.shape[2] > x.shape[2] + 2 * padding or w.shape[3] > x.shape[3] + 2 * padding:
        raise ShapeError("conv2d: kernel larger than (padded) input")
    xv, wv = x.value, w.value
    out = _conv_forward(xv, wv, stride, padding)

    def back(g):
        gx = _conv_input_grad(g, wv, xv.shape, stride, padding) if x.needs_grad else None
        gw = _conv_weight_grad(xv, g, wv.shape, stride, padding) if w.needs_grad else None
        return gx, gw

    return gr.record("conv2d", out, (x, w), back)


def conv_transpose2d(x, w, stride: int = 1, padding: int = 0, output_size=None) -> Node:
    """Adjoint of :func:`conv2d` with respect to its input.

    ``w`` has the forward-conv layout (O,C,kh,kw); ``x`` has O channels and the
    result has C channels.
    """
    gr = _graph_of(x, w)
    x, w = _lift(gr, x), _lift(gr, w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"conv_transpose2d: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.value, w.value
    kh, kw = wv.shape[2:]
    if output_size is None:
        output_size = ((xv.shape[2] - 1) * stride - 2 * padding + kh,
                       (xv.shape[3] - 1) * stride - 2 * padding + kw)
    oshape = (xv.shape[0], wv.shape[1], *output_size)
    if (_conv_out(oshape[2], kh, stride, padding), _conv_out(oshape[3], kw, stride, padding)) != xv.shape[2:]:
        raise ShapeError("conv_transpose2d: output_size inconsistent with input size")
    out = _conv_input_grad(xv, wv, oshape, stride, padding)

    def back(g):
        gx = _conv_forward(g, wv, stride, padding) if x.needs_grad else None
        gw = _conv_weight_grad(g, xv, wv.shape, stride, padding) if w.needs_grad else None
        return gx, gw

    return gr.record("conv_transpose2d", out, (x, w), back)


# --------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a node (in a fresh graph) to a scalar node.
    """
    x = np.array(x, dtype=np.float64)
    graph = ValueGraph()
    leaf = graph.leaf(x)
    root = f(leaf)
    analytic = graph.backward(root)[leaf]

    def value_at(point):
        g = ValueGraph()
        val = float(f(g.constant(point)).value)
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: function returned a non-finite value")
        return val

    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        cd = (value_at(plus.reshape(x.shape)) - value_at(minus.reshape(x.shape))) / (2 * step)
        an = analytic.reshape(-1)[i]
        err = abs(an - cd) / max(abs(an), abs(cd), 1e-12)
        worst = max(worst, err)
    return worst


def values(nodes: Iterable[Node]) -> list[Tensor]:
    return [n.value for n in nodes]
