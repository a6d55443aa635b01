"""Dense reverse-mode automatic differentiation on numpy arrays.

Every trainable quantity in the package is a :class:`Value`.  Operations
record a node (parents plus a vector-Jacobian closure) whenever one of their
inputs requires a gradient; :func:`backward` walks that record in reverse
topological order and accumulates into ``grad`` of the leaves.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_tls = threading.local()


class AutodiffError(Exception):
    """Base class for errors raised by the autodiff core."""


class ShapeError(AutodiffError, ValueError):
    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        joined = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class UnknownOpError(AutodiffError, KeyError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


def is_grad_enabled() -> bool:
    return getattr(_tls, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _tls.enabled = False
    try:
        yield
    finally:
        _tls.enabled = prev


def _as_array(data: Any, dtype=None) -> np.ndarray:
    if isinstance(data, Value):
        data = data.data
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype == np.float32:
            dtype = np.float32
        else:
            dtype = DEFAULT_DTYPE
    return np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) \
        else data.astype(dtype, copy=False)


class Value:
    """A dense array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "op")
    __array_priority__ = 1000
    __array_ufunc__ = None

    def __init__(self, data: Any, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Value, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> Value:
        return Value(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Value(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar -----------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> Value:
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sigmoid(self):
        return sigmoid(self)

    def backward(self, seed: np.ndarray | None = None) -> None:
        backward(self, seed=seed)


def as_value(x: Any) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _result(data: np.ndarray, parents: Sequence[Value], vjp, op: str) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _bshape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _pair(a, b) -> tuple[Value, Value]:
    a, b = as_value(a), as_value(b)
    if a.dtype != b.dtype:
        # constants follow the dtype of the differentiable side
        if not b.requires_grad:
            b = Value(b.data, dtype=a.dtype)
        elif not a.requires_grad:
            a = Value(a.data, dtype=b.dtype)
    return a, b


# ---------------------------------------------------------------------------
# elementwise binary ops
# ---------------------------------------------------------------------------

def add(a, b) -> Value:
    a, b = _pair(a, b)
    _bshape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Value:
    a, b = _pair(a, b)
    _bshape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Value:
    a, b = _pair(a, b)
    _bshape("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)
    return _result(ad * bd, (a, b), vjp, "mul")


def div(a, b) -> Value:
    a, b = _pair(a, b)
    _bshape("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)
    return _result(out, (a, b), vjp, "div")


def where(cond, a, b) -> Value:
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    a, b = _pair(a, b)
    c = np.asarray(cond, dtype=bool)
    out = np.where(c, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _result(out, (a, b), lambda g: (_unbroadcast(np.where(c, g, 0.0), sa),
                                           _unbroadcast(np.where(c, 0.0, g), sb)), "where")


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(a) -> Value:
    a = as_value(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Value:
    a = as_value(a)
    x = a.data
    return _result(x ** p, (a,), lambda g: (g * p * x ** (p - 1),), "pow")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,), "log")


def sqrt(a) -> Value:
    a = as_value(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / np.where(out > 0, out, np.inf),), "sqrt")


def sin(a) -> Value:
    a = as_value(a)
    x = a.data
    return _result(np.sin(x), (a,), lambda g: (g * np.cos(x),), "sin")


def cos(a) -> Value:
    a = as_value(a)
    x = a.data
    return _result(np.cos(x), (a,), lambda g: (-g * np.sin(x),), "cos")


def sigmoid(a) -> Value:
    a = as_value(a)
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Value:
    a = as_value(a)
    x = a.data
    return _result(np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Value:
    # tanh approximation
    a = as_value(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)
    return _result(out, (a,), vjp, "gelu")


def absolute(a) -> Value:
    a = as_value(a)
    x = a.data
    return _result(np.abs(x), (a,), lambda g: (g * np.sign(x),), "abs")


def clamp(a, lo: float | None = None, hi: float | None = None) -> Value:
    """Clip to ``[lo, hi]``; the gradient is zero outside the interval."""
    a = as_value(a)
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones_like(x, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi
    return _result(out, (a,), lambda g: (g * inside,), "clamp")


# ---------------------------------------------------------------------------
# reductions and normalisations
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)
    return _result(np.asarray(out), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return vsum(a, axes, keepdims) * (1.0 / max(n, 1))


def softmax(a, axis: int = -1) -> Value:
    a = as_value(a)
    x = a.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (a,), vjp, "softmax")


def layernorm(a, eps: float = 1e-5) -> Value:
    """Normalise over the last axis to zero mean and unit variance (no affine)."""
    a = as_value(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)
    return _result(xhat, (a,), vjp, "layernorm")


def l2norm(a, axis: int = -1, keepdims: bool = False) -> Value:
    a = as_value(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * x / safe * (n > 0),)
    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result(out, (a,), vjp, "l2norm")


def cumsum(a, axis: int = 0, exclusive: bool = False) -> Value:
    a = as_value(a)
    x = a.data
    out = np.cumsum(x, axis=axis)
    if exclusive:
        out = out - x

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g if exclusive else rev,)
    return _result(out, (a,), vjp, "cumsum")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Value:
    a, b = _pair(a, b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + (b.shape[-1],)) \
            if b.ndim > 1 else vsum(a * b)
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb
    return _result(ad @ bd, (a, b), vjp, "matmul")


def cross(a, b) -> Value:
    """Cross product along the last axis (extent 3), with broadcasting."""
    a, b = _pair(a, b)
    if a.shape[-1:] != (3,) or b.shape[-1:] != (3,):
        raise ShapeError("cross", a.shape, b.shape)
    _bshape("cross", a.data, b.data)
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(np.cross(bd, g), ad.shape), _unbroadcast(np.cross(g, ad), bd.shape))
    return _result(np.cross(ad, bd), (a, b), vjp, "cross")


def inv(a) -> Value:
    """Batched matrix inverse over the last two axes."""
    a = as_value(a)
    out = np.linalg.inv(a.data)

    def vjp(g):
        it = np.swapaxes(out, -1, -2)
        return (-(it @ g @ it),)
    return _result(out, (a,), vjp, "inv")


def polar_rotation(a) -> Value:
    """Proper rotation closest (Frobenius) to each 3x3 matrix in ``a``.

    Uses the SVD ``a = U S V^T`` and returns ``U diag(1, 1, det(U V^T)) V^T``.
    The backward pass differentiates the orthogonal polar factor.
    """
    a = as_value(a)
    A = a.data
    U, S, Vt = np.linalg.svd(A)
    sgn = np.sign(np.linalg.det(U @ Vt))
    sgn = np.where(sgn == 0, 1.0, sgn)
    D = np.ones(S.shape)
    D[..., -1] = sgn
    R = (U * D[..., None, :]) @ Vt
    sig = S * D
    V = np.swapaxes(Vt, -1, -2)

    def vjp(g):
        Mv = Vt @ (np.swapaxes(R, -1, -2) @ g) @ V
        denom = sig[..., :, None] + sig[..., None, :]
        denom = np.where(np.abs(denom) < 1e-12, np.inf, denom)
        P = V @ (Mv / denom) @ Vt
        return (R @ (P - np.swapaxes(P, -1, -2)),)
    return _result(R, (a,), vjp, "polar_rotation")


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(a, shape) -> Value:
    a = as_value(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Value:
    a = as_value(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    invp = np.argsort([ax % a.ndim for ax in axes])
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, invp),), "transpose")


def swapaxes(a, i: int, j: int) -> Value:
    a = as_value(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def getitem(a, idx) -> Value:
    a = as_value(a)
    if isinstance(idx, Value):
        idx = idx.data.astype(np.int64)
    out = a.data[idx]
    shape = a.shape
    dt = a.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)
    return _result(np.array(out, copy=True), (a,), vjp, "slice")


def concat(values: Iterable, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    datas = [v.data for v in vals]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[d.shape for d in datas]) from None
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return _result(out, vals, vjp, "concat")


def stack(values: Iterable, axis: int = 0) -> Value:
    vals = [as_value(v) for v in values]
    shapes = {v.shape for v in vals}
    if len(shapes) != 1:
        raise ShapeError("stack", *shapes)
    return concat([reshape(v, v.shape[:axis % (v.ndim + 1)] + (1,) + v.shape[axis % (v.ndim + 1):])
                   for v in vals], axis=axis)


def broadcast_to(a, shape) -> Value:
    a = as_value(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", a.shape, shape) from None
    old = a.shape
    return _result(out, (a,), lambda g: (_unbroadcast(g, old),), "broadcast_to")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def bilinear_sample(grid, pts) -> Value:
    """Bilinearly sample ``grid`` at continuous locations ``pts``.

    ``grid`` is ``(H, W, C)`` or batched ``(B, H, W, C)``; ``pts`` is
    ``(..., 2)`` (batched: ``(B, ..., 2)``) holding ``(x, y)`` in cell units,
    node ``grid[i, j]`` sitting at ``(x=j, y=i)``.  Out-of-range coordinates
    are clamped to the border and receive zero coordinate gradient.
    """
    grid, pts = as_value(grid), as_value(pts)
    batched = grid.ndim == 4
    if grid.ndim not in (3, 4) or pts.shape[-1] != 2 or (batched and pts.shape[0] != grid.shape[0]):
        raise ShapeError("bilinear_sample", grid.shape, pts.shape)
    G = grid.data if batched else grid.data[None]
    P = pts.data if batched else pts.data[None]
    B, H, W, C = G.shape
    lead = P.shape[1:-1]
    P = P.reshape(B, -1, 2)
    px, py = P[..., 0], P[..., 1]
    x = np.clip(px, 0.0, W - 1.0)
    y = np.clip(py, 0.0, H - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, max(W - 2, 0))
    y0 = np.clip(np.floor(y).astype(np.int64), 0, max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    bi = np.arange(B)[:, None]
    v00, v01 = G[bi, y0, x0], G[bi, y0, x1]
    v10, v11 = G[bi, y1, x0], G[bi, y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    out = top + fy * (bot - top)
    inx = ((px >= 0) & (px <= W - 1))[..., None] & (W > 1)
    iny = ((py >= 0) & (py <= H - 1))[..., None] & (H > 1)

    def vjp(g):
        g = g.reshape(B, -1, C)
        gg = None
        if grid.requires_grad:
            gg = np.zeros_like(G)
            w00, w01 = (1 - fx) * (1 - fy), fx * (1 - fy)
            w10, w11 = (1 - fx) * fy, fx * fy
            for yy, xx, w in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                np.add.at(gg, (np.broadcast_to(bi, yy.shape), yy, xx), g * w)
            if not batched:
                gg = gg[0]
        gp = None
        if pts.requires_grad:
            dx = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
            dy = (bot - top) * g
            gp = np.stack([(dx * inx).sum(-1), (dy * iny).sum(-1)], axis=-1)
            gp = gp.reshape((B,) + lead + (2,))
            if not batched:
                gp = gp[0]
        return gg, gp
    out = out.reshape((B,) + lead + (C,))
    return _result(out if batched else out[0], (grid, pts), vjp, "bilinear_sample")


# ---------------------------------------------------------------------------
# dispatch, backward, gradient check
# ---------------------------------------------------------------------------

OPS: dict[str, Callable[..., Value]] = {
    "matmul": matmul, "add": add, "mul": mul, "sub": sub, "div": div,
    "exp": exp, "log": log, "sigmoid": sigmoid, "softmax": softmax,
    "layernorm": layernorm, "relu": relu, "gelu": gelu, "concat": concat,
    "slice": getitem, "reshape": reshape, "transpose": transpose,
    "sum": vsum, "mean": mean, "cross": cross, "l2norm": l2norm,
    "bilinear_sample": bilinear_sample, "neg": neg, "pow": power,
    "sqrt": sqrt, "tanh": tanh, "where": where, "clamp": clamp,
    "cumsum": cumsum, "inv": inv, "polar_rotation": polar_rotation,
    "sin": sin, "cos": cos, "abs": absolute, "stack": stack,
    "broadcast_to": broadcast_to,
}


def op_forward(name: str, inputs: Sequence[Any], **attrs) -> Value:
    """Run a registered op by name."""
    try:
        fn = OPS[name]
    except KeyError:
        raise UnknownOpError(f"unknown op {name!r}") from None
    if name in ("concat", "stack"):
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)


class Graph:
    """Topologically ordered record of the nodes that produced ``root``."""

    def __init__(self, root: Value):
        self.root = root
        self.nodes = _toposort(root)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Value]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]

    def backward(self, seed: np.ndarray | None = None) -> None:
        _run_backward(self.nodes, self.root, seed)


def _toposort(root: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(nodes: list[Value], root: Value, seed) -> None:
    if root.size != 1:
        raise ShapeError("backward (root must be scalar)", root.shape)
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data) if seed is None
                                    else np.asarray(seed, dtype=root.dtype).reshape(root.shape)}
    for node in reversed(nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = pg if k not in grads else grads[k] + pg


def backward(root: Value, graph: Graph | None = None, seed=None) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every leaf requiring it."""
    if graph is not None and graph.root is not root:
        raise AutodiffError("graph was not produced by this root")
    (graph or Graph(root)).backward(seed)


def grad_check(f: Callable[[Value], Value], x: Value | np.ndarray, eps: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    x0 = np.array(x.data if isinstance(x, Value) else x, dtype=np.float64)
    xv = Value(x0.copy(), requires_grad=True)
    y = f(xv)
    if not np.all(np.isfinite(y.data)):
        raise NonFiniteError("f(x) is not finite")
    backward(y)
    analytic = np.zeros_like(x0) if xv.grad is None else xv.grad
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            xp = flat.copy()
            xp[i] += eps
            fp = f(Value(xp.reshape(x0.shape))).data
            xp[i] -= 2 * eps
            fm = f(Value(xp.reshape(x0.shape))).data
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise NonFiniteError(f"non-finite f at coordinate {i}")
            numeric.reshape(-1)[i] = (float(np.sum(fp)) - float(np.sum(fm))) / (2 * eps)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)), initial=0.0))
