"""Dense numpy-backed tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`GradTape` are recorded in
execution order; :meth:`GradTape.backward` replays them in reverse. Outside a
tape every op is a plain forward computation, which is what inference uses.

Binary ops accept operands of identical shape or a scalar. Anything else must
be made explicit with :func:`expand`.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, ndtr

__all__ = [
    "Tensor", "GradTape", "ShapeError", "tensor", "backward",
    "add", "sub", "mul", "scale", "neg", "div",
    "exp", "abs", "square", "silu", "gelu", "clip",
    "matmul", "conv2d", "layer_norm", "softmax",
    "sum", "mean", "reshape", "transpose", "expand", "concat",
    "downsample2", "upsample2", "dropout",
]

_local = threading.local()

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "GradTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Tapes are thread-local. Use one per training step::

        with GradTape() as tape:
            loss = model_loss(...)
        tape.backward(loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, out: "Tensor", parents: tuple, backward: Callable) -> None:
        node = _Node(out, parents, backward)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: "Tensor") -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` and free the tape."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None:
            if loss.requires_grad:
                _accumulate_leaf(loss, np.ones_like(loss.data))
            self.release()
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            self.visits += 1
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    _accumulate_leaf(p, pg)
                else:
                    key = id(p)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        self.release()

    def release(self) -> None:
        # tensor <-> node links form cycles; break them so each step's graph is freed immediately
        for node in self.nodes:
            node.out._node = None
            node.out = None
            node.parents = ()
            node.backward = None
        self.nodes.clear()


def _accumulate_leaf(leaf: "Tensor", g: np.ndarray) -> None:
    g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.data.shape)
    leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: "Tensor") -> None:
    """Run backward on the innermost active tape of this thread."""
    tape = current_tape()
    if tape is None:
        raise RuntimeError("backward() called with no active GradTape")
    tape.backward(loss)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    size = property(lambda self: self.data.size)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.data.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_operands(a, b, opname: str) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b if isinstance(b, Tensor) else None
    a, b = _as_tensor(a, like), _as_tensor(b, like)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")
    return a, b


def _fit(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce an upstream grad to the operand's shape (scalar operands)."""
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=t.dtype).reshape(t.shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)))


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)))


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_fit(g * bd, a), _fit(g * ad, b)))


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "div")
    ad, bd = a.data, b.data
    return _result(ad / bd, (a, b),
                   lambda g: (_fit(g / bd, a), _fit(-g * ad / (bd * bd), b)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result(a.data * a.dtype.type(c), (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _result(y, (a,), lambda g: (g * y,))


def abs(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return _result(x * x, (a,), lambda g: (2.0 * g * x,))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = expit(x)
    return _result(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),))


def gelu(a: Tensor, approximate: str = "none") -> Tensor:
    """GELU. ``approximate="none"`` is x*Phi(x); ``"tanh"`` is the usual tanh fit."""
    x = a.data
    if approximate == "none":
        cdf = ndtr(x)
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        y = x * cdf
        dy = cdf + x * pdf
    elif approximate == "tanh":
        inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
        th = np.tanh(inner)
        y = 0.5 * x * (1.0 + th)
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner
    else:
        raise ValueError(f"unknown gelu approximation {approximate!r}")
    y = y.astype(x.dtype, copy=False)
    return _result(y, (a,), lambda g: (g * dy,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _result(np.clip(x, lo, hi), (a,), lambda g: (g * inside,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.dtype) / a.dtype.type(1.0 - p)
    return mul(a, Tensor(keep))


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading (batch) axes must match."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), back)


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """3x3 cross-correlation with zero padding 1 ('same').

    ``x`` is (..., C_in, H, W) and ``k`` is (C_out, C_in, 3, 3).
    """
    if k.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: kernel must be (C_out, C_in, 3, 3), got {k.shape}")
    if x.ndim < 3 or x.shape[-3] != k.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match kernel {k.shape}")
    lead = x.shape[:-3]
    c_in, h, w = x.shape[-3:]
    c_out = k.shape[0]
    # channels-last im2col: cols[(n, i, j), (di, dj, c)]
    xl = x.data.reshape(-1, c_in, h, w).transpose(0, 2, 3, 1)
    n = xl.shape[0]
    xp = np.zeros((n, h + 2, w + 2, c_in), dtype=xl.dtype)
    xp[:, 1:-1, 1:-1, :] = xl
    cols = np.empty((n, h, w, 9, c_in), dtype=xl.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, :, 3 * di + dj, :] = xp[:, di:di + h, dj:dj + w, :]
    cols = cols.reshape(n * h * w, 9 * c_in)
    kmat = k.data.transpose(2, 3, 1, 0).reshape(9 * c_in, c_out)
    out = (cols @ kmat).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out).reshape(*lead, c_out, h, w)

    def back(g):
        gm = np.ascontiguousarray(g.reshape(n, c_out, h, w).transpose(0, 2, 3, 1)).reshape(-1, c_out)
        gk = None
        if k.requires_grad:
            gk = (cols.T @ gm).reshape(3, 3, c_in, c_out).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            gcols = (gm @ kmat.T).reshape(n, h, w, 9, c_in)
            gxp = np.zeros((n, h + 2, w + 2, c_in), dtype=gcols.dtype)
            for di in range(3):
                for dj in range(3):
                    gxp[:, di:di + h, dj:dj + w, :] += gcols[:, :, :, 3 * di + dj, :]
            gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1, :].transpose(0, 3, 1, 2)).reshape(x.shape)
        return gx, gk

    return _result(out, (x, k), back)


def layer_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine; compose with mul/add for that)."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return _result(y.astype(xd.dtype, copy=False), (x,), back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


# ---------------------------------------------------------------- reductions & shape

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else s for i, s in enumerate(shape))
    out = x.data.sum(axis=axes, keepdims=keepdims)
    return _result(np.asarray(out), (x,),
                   lambda g: (np.broadcast_to(np.reshape(g, kept), shape).copy(),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; gradient sums over the broadcast axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as err:
        raise ShapeError(f"expand: cannot broadcast {src} to {shape}") from err
    extra = len(shape) - len(src)

    def back(g):
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _result(np.ascontiguousarray(out), (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    axis = axis % xs[0].ndim
    for t in xs[1:]:
        other = [s for i, s in enumerate(t.shape) if i != axis]
        base = [s for i, s in enumerate(xs[0].shape) if i != axis]
        if other != base:
            raise ShapeError(f"concat: shapes {xs[0].shape} and {t.shape} differ off axis {axis}")
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def downsample2(x: Tensor) -> Tensor:
    """Keep every second row/column of the last two axes; grad scatters into zeros."""
    shape = x.shape

    def back(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., ::2, ::2] = g
        return (full,)

    return _result(np.ascontiguousarray(x.data[..., ::2, ::2]), (x,), back)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    *lead, h, w = x.shape
    out = np.broadcast_to(x.data[..., :, None, :, None], (*lead, h, 2, w, 2)).reshape(*lead, 2 * h, 2 * w)
    return _result(np.ascontiguousarray(out), (x,),
                   lambda g: (g.reshape(*lead, h, 2, w, 2).sum(axis=(-3, -1)),))
