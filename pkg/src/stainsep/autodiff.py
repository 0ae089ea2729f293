"""Small reverse-mode automatic differentiation engine on top of numpy.

Only the operations needed by the encoder, the Beer-Lambert decoder and the
training losses are provided. Arrays are dense, NCHW for images.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "tensor", "as_tensor",
    "set_default_dtype", "get_default_dtype", "strict_mode", "no_grad",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "softplus",
    "relu", "abs", "maximum", "matmul", "conv2d", "concat", "avg_pool2",
    "upsample2", "sum", "mean", "masked_mean", "reshape", "transpose",
    "take", "square",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        joined = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {joined}")


class NonFiniteError(FloatingPointError):
    """Raised in strict mode when an operand holds NaN or inf."""


_STATE = {"dtype": np.float32, "strict": False, "grad": True}


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _STATE["dtype"] = dtype.type


def get_default_dtype():
    return _STATE["dtype"]


@contextlib.contextmanager
def default_dtype(dtype):
    old = _STATE["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _STATE["dtype"] = old


@contextlib.contextmanager
def strict_mode(enabled: bool = True):
    """Reject non-finite operands while active."""
    old = _STATE["strict"]
    _STATE["strict"] = enabled
    try:
        yield
    finally:
        _STATE["strict"] = old


@contextlib.contextmanager
def no_grad():
    """Build no backward graph inside the block."""
    old = _STATE["grad"]
    _STATE["grad"] = False
    try:
        yield
    finally:
        _STATE["grad"] = old


class Tensor:
    """An ndarray plus an optional gradient accumulator and graph node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or (data.dtype if isinstance(data, np.ndarray)
                          and data.dtype in (np.float32, np.float64)
                          else _STATE["dtype"])
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, op={self.op})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 else axes)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype or _STATE["dtype"]), requires_grad)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _STATE["dtype"]
    return Tensor(np.asarray(x, dtype=dtype))


def _check_finite(op: str, *arrays) -> None:
    if _STATE["strict"]:
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise NonFiniteError(f"{op}: non-finite input")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    out.op = op
    if _STATE["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _binary_pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape("add", a, b)
    _check_finite("add", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", a.data, b.data)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", a.data, b.data)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)
    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _binary_pair(a, b)
    _broadcast_shape("div", a, b)
    _check_finite("div", a.data, b.data)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)
    return _make(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def square(x: Tensor) -> Tensor:
    _check_finite("square", x.data)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def exp(x: Tensor) -> Tensor:
    _check_finite("exp", x.data)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    """Natural log of ``x + eps``."""
    if eps < 0:
        raise ValueError("log: eps must be >= 0")
    _check_finite("log", x.data)
    shifted = x.data + x.dtype.type(eps)
    return _make(np.log(shifted), (x,), lambda g: (g / shifted,), "log")


def sqrt(x: Tensor) -> Tensor:
    _check_finite("sqrt", x.data)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def softplus(x: Tensor) -> Tensor:
    _check_finite("softplus", x.data)
    e = np.exp(-np.abs(x.data))
    out = np.maximum(x.data, 0) + np.log1p(e)

    def bw(g):
        sig = np.where(x.data >= 0, 1.0, e) / (1.0 + e)
        return (g * sig,)
    return _make(out, (x,), bw, "softplus")


def relu(x: Tensor) -> Tensor:
    _check_finite("relu", x.data)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * pos,), "relu")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    _check_finite("abs", x.data)
    sign = np.sign(x.data)
    return _make(np.abs(x.data), (x,), lambda g: (g * sign,), "abs")


def maximum(x: Tensor, c: float) -> Tensor:
    """Elementwise ``max(x, c)`` against a constant."""
    _check_finite("maximum", x.data)
    keep = x.data > c
    out = np.where(keep, x.data, x.dtype.type(c))
    return _make(out, (x,), lambda g: (g * keep,), "maximum")


# ------------------------------------------------------------------ structure

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, shape) from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def take(x: Tensor, index: int, axis: int = 1, keepdims: bool = True) -> Tensor:
    """Select one slice along ``axis``."""
    n = x.shape[axis]
    if not -n <= index < n:
        raise IndexError(f"take: index {index} out of range for axis of size {n}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(index, index + 1) if keepdims else index
    sl = tuple(sl)
    out = x.data[sl]

    def bw(g):
        full = np.zeros_like(x.data)
        full[sl] = g
        return (full,)
    return _make(np.ascontiguousarray(out), (x,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", ref, t.shape)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))
    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tensors, bw, "concat")


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)
    return _make(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis, keepdims), 1.0 / n)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where the (broadcastable) mask is true.

    An empty mask gives 0.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    count = int(mask.sum())
    w = mask.astype(x.dtype) / max(count, 1)
    return sum(mul(x, Tensor(w)))


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary_pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    _check_finite("matmul", a.data, b.data)

    def bw(g):
        return g @ b.data.T, a.data.T @ g
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def _slice(k: int, stride: int, n: int) -> slice:
    return slice(k, k + stride * (n - 1) + 1, stride)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and OIHW kernel, zero padding."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    _check_finite("conv2d", x.data, w.data)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # channel-major copy so every kernel offset is one contiguous block of cols
    xt = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xt[:, :, padding:padding + h, padding:padding + wd] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, _slice(i, stride, ho), _slice(j, stride, wo)]
    cols2 = cols.reshape(c * kh * kw, n * ho * wo)
    out = (w.data.reshape(o, -1) @ cols2).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
        gw = (g2 @ cols2.T).reshape(w.shape).astype(w.dtype) if w.requires_grad else None
        if not x.requires_grad:
            return None, gw
        gcols = (w.data.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
        gxt = np.zeros((c, n, hp, wp), dtype=gcols.dtype)
        for i in range(kh):
            for j in range(kw):
                gxt[:, :, _slice(i, stride, ho), _slice(j, stride, wo)] += gcols[:, i, j]
        gx = gxt[:, :, padding:padding + h, padding:padding + wd].transpose(1, 0, 2, 3)
        return np.ascontiguousarray(gx), gw
    return _make(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2", x.shape, (2, 2))
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * x.dtype.type(0.25)
        return (g,)
    return _make(out.astype(x.dtype), (x,), bw, "avg_pool2")


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)
    return _make(out, (x,), bw, "upsample2")


# ------------------------------------------------------------------- backward

def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every graph tensor needing it."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
              step: float = 1e-4) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` maps Tensors to a scalar Tensor. Runs in float64.
    """
    with default_dtype(np.float64):
        leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        backward(fn(*leaves))
        worst = 0.0
        for k, leaf in enumerate(leaves):
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            base = [np.array(a, dtype=np.float64) for a in inputs]
            numeric = np.zeros_like(base[k])
            flat = base[k].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                with no_grad():
                    fp = fn(*[Tensor(b) for b in base]).item()
                flat[i] = orig - step
                with no_grad():
                    fm = fn(*[Tensor(b) for b in base]).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
            scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
            worst = max(worst, float(np.max(np.abs(analytic - numeric)) / scale))
    return worst
