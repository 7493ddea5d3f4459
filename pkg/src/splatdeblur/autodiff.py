"""Define-by-run reverse-mode differentiation over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a
vector-Jacobian product closure. :func:`backward` walks the recorded graph in
reverse topological order and accumulates ``.grad`` on every node that
requires it. The graph is rebuilt on each forward pass.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a tape."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor dispatch to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.vjp: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(op={self.op}{tag}, shape={self.shape})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(parents) -> bool:
    return _GRAD_ENABLED and any(p.requires_grad for p in parents)


def make_node(data, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    """Record a new node. ``vjp(g)`` returns one gradient (or None) per parent.

    This is also the extension point for fused primitives such as the
    rasterizer, which supply a hand-written ``vjp``.
    """
    out = Tensor(data)
    out.op = op
    if _needs_grad(parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"non-finite values produced by op '{op}'")
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return make_node(a.data + b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return make_node(a.data - b.data, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return make_node(a.data * b.data, (a, b),
                     lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                     "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make_node(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def clamp_min(a, lo: float) -> Tensor:
    a = as_tensor(a)
    keep = a.data > lo
    return make_node(np.where(keep, a.data, lo), (a,), lambda g: (g * keep,), "clamp_min")


# ---------------------------------------------------------------------------
# elementwise unary ops


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return make_node(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.data))
    return make_node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sin(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_node(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return div(tsum(a, axis, keepdims), float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[:-2] + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_node(np.broadcast_to(a.data, shape).copy(), (a,),
                     lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def getitem(a, idx) -> Tensor:
    """Basic and integer-array indexing (the slice op)."""
    a = as_tensor(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return make_node(a.data[idx], (a,), vjp, "slice")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[d] != ts[0].shape[d] for d in range(t.ndim) if d != axis
        ):
            raise ValueError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_node(np.concatenate([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    return make_node(np.stack([t.data for t in ts], axis=axis), ts,
                     lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ValueError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        A = a.data[None, :] if a.ndim == 1 else a.data
        B = b.data[:, None] if b.ndim == 1 else b.data
        G = g
        if a.ndim == 1:
            G = np.expand_dims(G, -2)
        if b.ndim == 1:
            G = np.expand_dims(G, -1)
        ga = G @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ G
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., :, 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_node(out, (a, b), vjp, "matmul")


def inv(a) -> Tensor:
    """Batched square-matrix inverse."""
    a = as_tensor(a)
    out = np.linalg.inv(a.data)

    def vjp(g):
        oT = np.swapaxes(out, -1, -2)
        return (-(oT @ g @ oT),)

    return make_node(out, (a,), vjp, "inv")


# ---------------------------------------------------------------------------
# neural-network ops


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (a,), vjp, "softmax")


def _conv_cols(xp, w, H, W):
    """im2col variant: one GEMM against every patch. Cheap when C*k*k is small."""
    B, Hp, Wp, C = xp.shape
    Co, _, k, _ = w.shape
    cols = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(-1, C * k * k)
    wmat = w.reshape(Co, -1)
    out = (cols @ wmat.T).reshape(B, H, W, Co)

    def vjp(gl):
        gflat = gl.reshape(-1, Co)
        gw = (gflat.T @ cols).reshape(w.shape)
        gcols = (gflat @ wmat).reshape(B, H, W, C, k, k)
        gxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + H, j:j + W, :] += gcols[..., i, j]
        return gxp, gw

    return out, vjp


def _conv_taps(xp, w, H, W):
    """Per-tap variant on the flattened padded grid.

    A tap (i, j) is a shift of i*Wp + j rows, so every GEMM runs on contiguous
    slices. Rows past the valid H x W window are zero padding or discarded,
    which keeps shifts from leaking across images.
    """
    B, Hp, Wp, C = xp.shape
    Co, _, k, _ = w.shape
    xflat = xp.reshape(-1, C)
    n = len(xflat)
    shifts = [(i, j, i * Wp + j) for i in range(k) for j in range(k)]
    wt = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # strided weight slices defeat BLAS
    grid = np.zeros((n, Co))
    for i, j, s in shifts:
        grid[:n - s] += xflat[s:] @ wt[i, j]
    out = grid.reshape(B, Hp, Wp, Co)[:, :H, :W, :]

    def vjp(gl):
        wc = np.ascontiguousarray(w.transpose(2, 3, 0, 1))
        gz = np.zeros((B, Hp, Wp, Co))
        gz[:, :H, :W, :] = gl
        gflat = gz.reshape(-1, Co)
        gw = np.empty((k, k, Co, C))
        gxflat = np.zeros_like(xflat)
        for i, j, s in shifts:
            gw[i, j] = gflat[:n - s].T @ xflat[s:]
            gxflat[s:] += gflat[:n - s] @ wc[i, j]
        return gxflat.reshape(xp.shape), gw.transpose(2, 3, 0, 1)

    return out, vjp


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 cross-correlation with zero padding that preserves H and W.

    x: (B, C_in, H, W); w: (C_out, C_in, k, k) with odd k; b: (C_out,).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    Co, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))  # channels last
    impl = _conv_cols if C * k * k <= 128 else _conv_taps
    out, inner_vjp = impl(xp, w.data, H, W)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (Co,):
            raise ValueError(f"conv2d: bias shape {b.shape} does not match {Co} output channels")
        out += b.data
        parents.append(b)

    def vjp(g):
        gxp, gw = inner_vjp(g.transpose(0, 2, 3, 1))
        grads = [gxp[:, p:p + H, p:p + W, :].transpose(0, 3, 1, 2), gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make_node(out.transpose(0, 3, 1, 2), parents, vjp, "conv2d")


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every reachable node."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.vjp is None:  # leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, gp in zip(node.parents, node.vjp(g)):
            if gp is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = gp if k not in grads else grads[k] + gp


# ---------------------------------------------------------------------------
# parameters


class ParamStore:
    """Named learnable arrays, each assigned to an optimizer group."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.groups: dict[str, str] = {}

    def add(self, name: str, value, group: str = "default") -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.groups[name] = group
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def names(self, group: str | None = None) -> list[str]:
        return [n for n in self.params if group is None or self.groups[n] == group]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for n, v in state.items():
            if n not in self.params:
                raise KeyError(f"unknown parameter {n!r}")
            if self.params[n].shape != np.shape(v):
                raise ValueError(f"{n}: shape {np.shape(v)} != {self.params[n].shape}")
            self.params[n].data = np.array(v, dtype=np.float64)


def numerical_grad(fn: Callable[[], float], x: np.ndarray, eps: float = 1e-5,
                   indices: Iterable | None = None) -> np.ndarray:
    """Central differences of a scalar function w.r.t. array ``x`` (modified in place)."""
    g = np.zeros_like(x)
    idx = np.ndindex(x.shape) if indices is None else indices
    for i in idx:
        old = x[i]
        x[i] = old + eps
        fp = fn()
        x[i] = old - eps
        fm = fn()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g
