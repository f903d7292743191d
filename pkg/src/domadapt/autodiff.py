"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a graph node holding its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``backward`` sorts the graph
reachable from a scalar root into a tape (inputs before outputs) and sweeps
it once in reverse.  Only leaves accumulate into ``.grad``; intermediate
gradients live in a per-call table, so calling ``backward`` twice doubles
leaf gradients and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

EPS = 1e-12

GradFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "op", "_parents", "_grad_fn")
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad: bool = False, op: str = "leaf"):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.values) if requires_grad else None
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: GradFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def tape_id(self) -> str:
        return self.op

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], grad_fn: GradFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.grad = None  # non-leaf gradients are never stored
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
    else:
        out.requires_grad = False
        out.grad = None
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- tape


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a root."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)


def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(
        a.values + b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "subtract")
    sa, sb = a.shape, b.shape
    return _make(
        a.values - b.values,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "subtract",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "multiply")
    av, bv = a.values, b.values
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "multiply",
    )


def div(a, b) -> Tensor:
    """a / (b + EPS) for positive denominators; the guard keeps 1/0 finite."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "divide")
    av = a.values
    den = b.values + EPS
    out = av / den

    def grad_fn(g):
        return (_unbroadcast(g / den, av.shape), _unbroadcast(-g * out / den, den.shape))

    return _make(out, (a, b), grad_fn, "divide")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.values, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.values > 0
    return _make(np.where(on, a.values, 0.0), (a,), lambda g: (g * on,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.values)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    a = as_tensor(a)
    x = a.values
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.values + EPS
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.values + EPS)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


# ---------------------------------------------------------------- reductions / linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def linear(x, w, b=None) -> Tensor:
    """x @ w + b as a single node."""
    x, w = as_tensor(x), as_tensor(w)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv
    if b is None:
        return _make(out, (x, w), lambda g: (g @ wv.T, xv.T @ g), "linear")
    b = as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias shape {b.shape} does not match weight {w.shape}")
    return _make(
        out + b.values,
        (x, w, b),
        lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)),
        "linear",
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.values.T, (a,), lambda g: (g.T,), "transpose")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.values.sum(axis=axis, keepdims=keepdims)), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), grad_fn, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.values - a.values.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _make(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def sq_dist(a, b) -> Tensor:
    """Pairwise squared Euclidean distances between the rows of a (m, d) and b (n, d)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"sq_dist: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    diff = av[:, None, :] - bv[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def grad_fn(g):
        ga = 2.0 * (g.sum(axis=1)[:, None] * av - g @ bv)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bv - g.T @ av)
        return ga, gb

    return _make(out, (a, b), grad_fn, "sq_dist")


def cosine_similarity(u, v) -> Tensor:
    """Cosine similarity along the last axis; 0 when either norm is below EPS."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: incompatible shapes {u.shape} and {v.shape}")
    uv, vv = u.values, v.values
    nu = np.linalg.norm(uv, axis=-1, keepdims=True)
    nv = np.linalg.norm(vv, axis=-1, keepdims=True)
    ok = (nu >= EPS) & (nv >= EPS)
    nu_s = np.where(ok, nu, 1.0)
    nv_s = np.where(ok, nv, 1.0)
    dot = (uv * vv).sum(axis=-1, keepdims=True)
    c = np.where(ok, dot / (nu_s * nv_s), 0.0)

    def grad_fn(g):
        g = g[..., None] * ok
        gu = g * (vv / (nu_s * nv_s) - c * uv / nu_s**2)
        gv = g * (uv / (nu_s * nv_s) - c * vv / nv_s**2)
        return gu, gv

    return _make(c[..., 0], (u, v), grad_fn, "cosine_similarity")


# ---------------------------------------------------------------- shape plumbing


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def grad_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(a.values[index]), (a,), grad_fn, "getitem")


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: incompatible shapes {[t.shape for t in tensors]}"
        ) from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(out, tensors, lambda g: np.split(g, cuts, axis=axis), "concatenate")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.values for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"stack: incompatible shapes {[t.shape for t in tensors]}") from None
    n = len(tensors)
    return _make(
        out,
        tensors,
        lambda g: [np.take(g, i, axis=axis) for i in range(n)],
        "stack",
    )


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).values.copy())


def straight_through(hard, soft) -> Tensor:
    """Forward value is exactly ``hard``; the gradient is routed to ``soft``."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: incompatible shapes {hard.shape} and {soft.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,), "straight_through")


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.values >= lo) & (a.values <= hi)
    return _make(np.clip(a.values, lo, hi), (a,), lambda g: (g * inside,), "clip")


def grad_reverse(a, lam: float = 1.0) -> Tensor:
    """Identity forward; multiplies the upstream gradient by -lam."""
    a = as_tensor(a)
    return _make(a.values, (a,), lambda g: (-lam * g,), "grad_reverse")


# ---------------------------------------------------------------- fused recurrent cell


def gru_cell(x, h, w_x, w_h, b) -> Tensor:
    """One GRU update for a batch.

    Gate blocks are packed [update z | reset r | candidate] along the last
    axis of ``w_x`` (D_in, 3D_h), ``w_h`` (D_h, 3D_h) and ``b`` (3D_h,):

        z  = sigmoid(x W_z + h U_z + b_z)
        r  = sigmoid(x W_r + h U_r + b_r)
        h~ = tanh(x W + (r * h) U + b)
        h' = z * h + (1 - z) * h~
    """
    x, h, w_x, w_h, b = (as_tensor(t) for t in (x, h, w_x, w_h, b))
    xv, hv, wx, wh = x.values, h.values, w_x.values, w_h.values
    if xv.ndim != 2 or hv.ndim != 2 or xv.shape[0] != hv.shape[0]:
        raise ShapeError(f"gru_cell: incompatible batch shapes {x.shape} and {h.shape}")
    d = hv.shape[1]
    if wx.shape != (xv.shape[1], 3 * d) or wh.shape != (d, 3 * d) or b.shape != (3 * d,):
        raise ShapeError(
            f"gru_cell: weights {w_x.shape}, {w_h.shape}, {b.shape} do not fit "
            f"input {x.shape} and hidden {h.shape}"
        )
    out, cache = _gru_forward(xv @ wx + b.values, hv, wh)

    def grad_fn(g):
        da, dh, dwh = _gru_backward(g, hv, wh, cache)
        return da @ wx.T, dh, xv.T @ da, dwh, da.sum(axis=0)

    return _make(out, (x, h, w_x, w_h, b), grad_fn, "gru_cell")


def _gru_forward(ax, hv, wh):
    """One cell given the precomputed input projection ax = x w_x + b."""
    d = hv.shape[1]
    hzr = hv @ wh[:, : 2 * d]
    z = _sigmoid(ax[:, :d] + hzr[:, :d])
    r = _sigmoid(ax[:, d : 2 * d] + hzr[:, d:])
    rh = r * hv
    n = np.tanh(ax[:, 2 * d :] + rh @ wh[:, 2 * d :])
    return z * hv + (1.0 - z) * n, (z, r, rh, n)


def _gru_backward(g, hv, wh, cache):
    """Returns (dL/d input projection, dL/dh, dL/dw_h) for one cell given dL/dh'."""
    z, r, rh, n = cache
    d = hv.shape[1]
    dn = g * (1.0 - z) * (1.0 - n * n)
    drh = dn @ wh[:, 2 * d :].T
    dzr = np.concatenate([g * (hv - n) * z * (1.0 - z), drh * hv * r * (1.0 - r)], axis=1)
    dh = g * z + drh * r + dzr @ wh[:, : 2 * d].T
    dwh = np.concatenate([hv.T @ dzr, rh.T @ dn], axis=1)
    return np.concatenate([dzr, dn], axis=1), dh, dwh


def gru_sequence(x, h0, w_x, w_h, b) -> Tensor:
    """Run gru_cell over the step axis of x (B, T, D_in); returns all states (B, T, D_h).

    One tape node; the backward pass is full BPTT.
    """
    x, h0, w_x, w_h, b = (as_tensor(t) for t in (x, h0, w_x, w_h, b))
    xv, wx, wh, bv = x.values, w_x.values, w_h.values, b.values
    if xv.ndim != 3 or h0.values.ndim != 2 or xv.shape[0] != h0.shape[0]:
        raise ShapeError(f"gru_sequence: incompatible shapes {x.shape} and {h0.shape}")
    Bn, T, _ = xv.shape
    d = h0.shape[1]
    if wx.shape != (xv.shape[2], 3 * d) or wh.shape != (d, 3 * d) or bv.shape != (3 * d,):
        raise ShapeError(
            f"gru_sequence: weights {w_x.shape}, {w_h.shape}, {b.shape} do not fit "
            f"input {x.shape} and hidden {h0.shape}"
        )
    ax = xv @ wx + bv  # (B, T, 3d)
    hs = np.empty((Bn, T, d))
    prevs, caches = [], []
    h = h0.values
    for t in range(T):
        prevs.append(h)
        h, cache = _gru_forward(ax[:, t], h, wh)
        hs[:, t] = h
        caches.append(cache)

    def grad_fn(g):
        dax = np.empty_like(ax)
        dwh = np.zeros_like(wh)
        carry = np.zeros((Bn, d))
        for t in range(T - 1, -1, -1):
            dax[:, t], carry, gwh = _gru_backward(g[:, t] + carry, prevs[t], wh, caches[t])
            dwh += gwh
        dwx = np.einsum("bti,btj->ij", xv, dax)
        return dax @ wx.T, carry, dwx, dwh, dax.sum(axis=(0, 1))

    return _make(hs, (x, h0, w_x, w_h, b), grad_fn, "gru_sequence")


# ---------------------------------------------------------------- dispatch + oracle

OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "linear": linear,
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "divide": div,
    "neg": neg,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sqrt": sqrt,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": tsum,
    "mean": mean,
    "sq_dist": sq_dist,
    "cosine_similarity": cosine_similarity,
    "concatenate": lambda *ts, axis=0: concatenate(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "reshape": reshape,
    "getitem": getitem,
    "transpose": transpose,
    "detach": detach,
    "grad_reverse": grad_reverse,
    "straight_through": straight_through,
    "clip": clip,
    "gru_cell": gru_cell,
    "gru_sequence": gru_sequence,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **kwargs)


def finite_difference_gradient(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f at x, one coordinate at a time."""
    base = x.values
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        orig = base.flat[i]
        base.flat[i] = orig + eps
        hi = f(x)
        base.flat[i] = orig - eps
        lo = f(x)
        base.flat[i] = orig
        hi = hi.item() if isinstance(hi, Tensor) else float(hi)
        lo = lo.item() if isinstance(lo, Tensor) else float(lo)
        flat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """||a - b|| / max(||a||, ||b||, floor).

    The floor keeps gradients that are zero up to round-off (central
    differences at eps=1e-5 carry ~1e-11 noise) from reading as large
    relative errors; below it the comparison is effectively absolute.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))
