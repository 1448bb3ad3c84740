"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every operation on a :class:`Tensor` that involves an input requiring
gradients records a :class:`Node` holding the inputs and a backward rule.
The recorded nodes form the tape for that forward pass; it is rebuilt on
every pass and released as soon as the output tensors are dropped.

Backward rules are themselves written with tensor operations, so a
gradient computed with ``create_graph=True`` can be differentiated again.
Nesting is capped at two levels, which is what Lagrangian dynamics and
exact divergences of Hamiltonian fields require.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_NESTING = 2  # deepest create_graph pass allowed


class ShapeError(ValueError):
    """Operands with incompatible shapes."""


class NestingError(RuntimeError):
    """Differentiation nested deeper than :data:`MAX_NESTING`."""


class _GradMode(threading.local):
    enabled = True
    level = 0  # differentiation level of nodes being recorded


_mode = _GradMode()


def is_grad_enabled() -> bool:
    return _mode.enabled


@contextmanager
def _set_grad(flag: bool):
    prev = _mode.enabled
    _mode.enabled = flag
    try:
        yield
    finally:
        _mode.enabled = prev


def no_grad():
    """Context manager disabling tape recording."""
    return _set_grad(False)


def enable_grad():
    """Context manager re-enabling tape recording (e.g. inside ``no_grad``)."""
    return _set_grad(True)


class NodeStats:
    """Counts live tape nodes; ``peak`` is the high-water mark since the last reset."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.created = 0

    def reset_peak(self):
        self.peak = self.live

    def __repr__(self):
        return f"NodeStats(live={self.live}, peak={self.peak}, created={self.created})"


node_stats = NodeStats()


class Node:
    """One tape entry: the operation, its inputs and its backward rule.

    ``backward(g, needs)`` maps the output cotangent ``g`` to a tuple of
    input cotangents (``None`` where ``needs[i]`` is false).
    ``level`` is 0 for forward operations and ``k`` for nodes recorded
    while running a ``create_graph`` backward pass at nesting level ``k``.
    """

    __slots__ = ("op", "inputs", "backward", "level")

    def __init__(self, op: str, inputs: tuple, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.backward = backward
        self.level = _mode.level
        node_stats.live += 1
        node_stats.created += 1
        if node_stats.live > node_stats.peak:
            node_stats.peak = node_stats.live

    def __del__(self):
        node_stats.live -= 1


class Tensor:
    """A dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- basic properties -------------------------------------------------
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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def requires_grad_(self, flag: bool = True) -> "Tensor":
        if not self.is_leaf:
            raise RuntimeError("requires_grad_ can only be set on leaf tensors")
        self.requires_grad = flag
        return self

    def __repr__(self):
        body = np.array2string(self.data, precision=6, separator=", ")
        suffix = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({body}{suffix})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def square(self):
        return square(self)

    def backward(self):
        backward(self)


class Parameter(Tensor):
    """A trainable leaf tensor owning a private copy of its data."""

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float64, copy=True), requires_grad=True)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    if _mode.enabled:
        if any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._node = Node(op, inputs, backward)
    return out


# -- shape helpers ------------------------------------------------------------


def _is_scalar(shape) -> bool:
    return len(shape) == 0 or shape == (1,)


def _check_broadcast(op: str, sa: tuple, sb: tuple) -> None:
    """Allow equal shapes, scalar operands, or broadcasting along the leading batch axis."""
    if sa == sb or _is_scalar(sa) or _is_scalar(sb):
        return
    big, small = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(big) >= 1 and (small == big[1:] or small == (1,) + big[1:]):
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _sum_to_data(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def sum_to(a: Tensor, shape: tuple) -> Tensor:
    """Sum ``a`` down to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape

    def bw(g, needs):
        return (broadcast_to(g, src),)

    return _make(_sum_to_data(a.data, shape), "sum_to", (a,), bw)


def broadcast_to(a: Tensor, shape: tuple) -> Tensor:
    """Explicit broadcast with numpy rules; use where the restricted implicit rule is too narrow."""
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc

    def bw(g, needs):
        return (sum_to(g, src),)

    return _make(np.ascontiguousarray(data), "broadcast_to", (a,), bw)


# -- elementwise ----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(g, sb) if needs[1] else None)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        return (sum_to(g, sa) if needs[0] else None, sum_to(neg(g), sb) if needs[1] else None)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)

    def bw(g, needs):
        return (
            sum_to(mul(g, b), a.shape) if needs[0] else None,
            sum_to(mul(g, a), b.shape) if needs[1] else None,
        )

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.shape, b.shape)

    def bw(g, needs):
        ga = sum_to(div(g, b), a.shape) if needs[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g, needs: (neg(g),))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise TypeError("power only supports constant exponents")
    p = float(p)
    if p == 2.0:
        return square(a)

    def bw(g, needs):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(a.data**p, "pow", (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, "square", (a,), lambda g, needs: (mul(g, mul(2.0, a)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, needs):
        t = tanh(a)
        return (mul(g, sub(1.0, mul(t, t))),)

    return _make(np.tanh(a.data), "tanh", (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.exp(a.data), "exp", (a,), lambda g, needs: (mul(g, exp(a)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), "log", (a,), lambda g, needs: (div(g, a),))


def _sigmoid_data(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def bw(g, needs):
        s = sigmoid(a)
        return (mul(g, mul(s, sub(1.0, s))),)

    return _make(_sigmoid_data(a.data), "sigmoid", (a,), bw)


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(data, "softplus", (a,), lambda g, needs: (mul(g, sigmoid(a)),))


_UNARY = {"neg": neg, "tanh": tanh, "softplus": softplus, "exp": exp, "square": square,
          "log": log, "sigmoid": sigmoid}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise TypeError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise TypeError(f"{op} takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- linear algebra ----------------------------------------------------------


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
    return _make(np.swapaxes(a.data, -1, -2), "transpose", (a,), lambda g, needs: (transpose(g),))


def matmul(a, b) -> Tensor:
    """Matrix product; ``a`` may carry one leading batch axis, ``b`` may too if it matches."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3):
        raise ShapeError(f"matmul: expected rank 2 or 3 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if b.ndim == 3 and (a.ndim != 3 or a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul: batched right operand needs matching batch, {a.shape} @ {b.shape}")
    sa, sb = a.shape, b.shape

    def bw(g, needs):
        ga = sum_to(matmul(g, transpose(b)), sa) if needs[0] else None
        gb = sum_to(matmul(transpose(a), g), sb) if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def solve(A, b) -> Tensor:
    """Batched linear solve ``A x = b`` with ``A`` [B, n, n] and ``b`` [B, n]."""
    A, b = as_tensor(A), as_tensor(b)
    if A.ndim != 3 or b.ndim != 2 or A.shape[1] != A.shape[2] or A.shape[:2] != b.shape:
        raise ShapeError(f"solve: expected [B,n,n] and [B,n], got {A.shape} and {b.shape}")
    data = np.linalg.solve(A.data, b.data[..., None])[..., 0]
    B, n = b.shape

    def bw(g, needs):
        gb = solve(transpose(A), g)
        gA = None
        if needs[0]:
            x = solve(A, b)
            gA = neg(matmul(reshape(gb, (B, n, 1)), reshape(x, (B, 1, n))))
        return gA, (gb if needs[1] else None)

    return _make(data, "solve", (A, b), bw)


# -- reductions and structure --------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    src = a.shape
    kept = np.sum(a.data, axis=axis, keepdims=True).shape

    def bw(g, needs):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axis = _norm_axis(axis, a.ndim)
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError(f"mean over an empty extent (shape {a.shape}, axis {axis})")
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reduce(op: str, a, axis=None) -> Tensor:
    if op == "sum":
        return sum(a, axis)
    if op == "mean":
        return mean(a, axis)
    raise ValueError(f"unknown reduction {op!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _make(data, "reshape", (a,), lambda g, needs: (reshape(g, src),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data[idx], "getitem", (a,), lambda g, needs: (_scatter(g, src, idx),))


def _scatter(g: Tensor, shape: tuple, idx) -> Tensor:
    out = np.zeros(shape)
    np.add.at(out, idx, g.data)
    return _make(out, "scatter", (g,), lambda gg, needs: (getitem(gg, idx),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    nd = tensors[0].ndim
    axis = _norm_axis(axis, nd)
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]} on axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            sl = [slice(None)] * nd
            sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def logsumexp(a, axis: int = -1) -> Tensor:
    """Stable log-sum-exp over one axis of a rank-2 tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"logsumexp expects rank 2, got {a.shape}")
    axis = _norm_axis(axis, 2)
    m = np.max(a.data, axis=axis, keepdims=True)
    data = (m + np.log(np.sum(np.exp(a.data - m), axis=axis, keepdims=True))).squeeze(axis)
    kept = tuple(1 if i == axis else n for i, n in enumerate(a.shape))

    def bw(g, needs):
        lse = broadcast_to(reshape(logsumexp(a, axis), kept), a.shape)
        probs = exp(sub(a, lse))
        return (mul(broadcast_to(reshape(g, kept), a.shape), probs),)

    return _make(data, "logsumexp", (a,), bw)


def custom_op(data, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record an operation with a user-supplied backward rule.

    ``backward(g, needs)`` must return one cotangent (or ``None``) per input.
    """
    return _make(data, op, tuple(inputs), backward)


# -- differentiation -----------------------------------------------------------


def _toposort(roots: Iterable[Tensor]) -> list:
    """Post-order (inputs before consumers) over tensors that require grad."""
    order, seen = [], set()
    stack_ = [(r, False) for r in roots if r.requires_grad]
    while stack_:
        t, expanded = stack_.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack_.append((t, True))
        if t._node is not None:
            for parent in t._node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack_.append((parent, False))
    return order


def _accumulate(store: dict, key: int, g: Tensor) -> None:
    prev = store.get(key)
    store[key] = g if prev is None else add(prev, g)


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False) -> list:
    """Vector-Jacobian products of ``outputs`` with respect to ``inputs``.

    ``grad_outputs`` defaults to ones, which requires scalar outputs.
    Inputs the outputs do not depend on receive zeros.  With
    ``create_graph`` the returned gradients are themselves differentiable.
    """
    outputs = [outputs] if isinstance(outputs, Tensor) else list(outputs)
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise ShapeError(f"grad of a non-scalar output (shape {o.shape}) needs grad_outputs")
        grad_outputs = [Tensor(np.ones(o.shape)) for o in outputs]
    else:
        grad_outputs = [grad_outputs] if isinstance(grad_outputs, (Tensor, np.ndarray)) else list(grad_outputs)
        grad_outputs = [as_tensor(g) for g in grad_outputs]
        for o, g in zip(outputs, grad_outputs):
            if o.shape != g.shape:
                raise ShapeError(f"grad_outputs shape {g.shape} does not match output shape {o.shape}")

    wanted = {id(t) for t in inputs}
    topo = _toposort(outputs)
    relevant = set()
    level = 1
    for t in topo:
        if id(t) in wanted or (t._node is not None and any(id(p) in relevant for p in t._node.inputs)):
            relevant.add(id(t))
            if t._node is not None and t._node.level >= level:
                level = t._node.level + 1
    if create_graph and level > MAX_NESTING:
        raise NestingError(f"differentiation nested deeper than {MAX_NESTING} levels is not supported")

    grads: dict = {}
    prev_level = _mode.level
    _mode.level = level
    try:
        _backward_pass(outputs, grad_outputs, topo, relevant, wanted, grads, create_graph)
    finally:
        _mode.level = prev_level

    result = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            g = Tensor(np.zeros(t.shape))
        elif not create_graph and g._node is not None:
            g = g.detach()
        result.append(g)
    return result[0] if single else result


def _backward_pass(outputs, grad_outputs, topo, relevant, wanted, grads, create_graph) -> None:
    with _set_grad(create_graph):
        for o, g in zip(outputs, grad_outputs):
            if o.requires_grad and id(o) in relevant:
                _accumulate(grads, id(o), g)
        for t in reversed(topo):
            key = id(t)
            if key not in relevant or t._node is None:
                continue
            g = grads.get(key) if key in wanted else grads.pop(key, None)
            if g is None:
                continue
            node = t._node
            needs = tuple(p.requires_grad and id(p) in relevant for p in node.inputs)
            parts = node.backward(g, needs)
            for p, need, gp in zip(node.inputs, needs, parts):
                if need and gp is not None:
                    _accumulate(grads, id(p), gp)


def backward(root: Tensor) -> dict:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` (numpy arrays) for every leaf requiring grad.

    Returns the mapping ``{leaf tensor: gradient array}`` for this call.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise RuntimeError("backward root is not connected to any tensor requiring grad")
    leaves = [t for t in _toposort([root]) if t._node is None]
    gs = grad(root, leaves)
    out = {}
    for leaf, g in zip(leaves, gs):
        leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data
        out[leaf] = g.data
    return out


def hessian(f: Callable[[Tensor], Tensor], x) -> np.ndarray:
    """Full second derivative of a scalar function on a small input (nested reverse passes)."""
    xt = Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    flat_n = xt.size
    with enable_grad():
        y = f(xt)
        if y.size != 1:
            raise ShapeError(f"hessian needs a scalar function, got output shape {y.shape}")
        g = reshape(grad(y, xt, create_graph=True), (flat_n,))
        rows = [grad(g[i], xt).data.reshape(-1) for i in range(flat_n)]
    return np.stack(rows)


grad_of_grad = hessian


def hvp(f: Callable[[Tensor], Tensor], x, v) -> np.ndarray:
    """Hessian-vector product by differentiating the directional derivative."""
    xt = Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    vt = as_tensor(v)
    with enable_grad():
        g = grad(f(xt), xt, create_graph=True)
        return grad(sum(mul(g, vt)), xt).data
