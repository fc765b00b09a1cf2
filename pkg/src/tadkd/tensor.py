"""Dense float64 tensors with tape-based reverse-mode autodiff.

Every op runs eagerly on numpy arrays. When grad recording is enabled and at
least one input requires a gradient, the output remembers its parents and a
closure that pushes the upstream gradient back to them. ``backward`` walks
that implicit DAG in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ArrayLike = Union[np.ndarray, float, int, Sequence]

_mode = threading.local()


class ShapeError(ValueError):
    """Raised when op inputs have incompatible shapes."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (per thread)."""
    prev = is_grad_enabled()
    _mode.enabled = False
    try:
        yield
    finally:
        _mode.enabled = prev


def is_grad_enabled() -> bool:
    return getattr(_mode, "enabled", True)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data: ArrayLike, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = "leaf"

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # -------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def _raise_scalar(t: Tensor):
    raise ShapeError(f"item: tensor of shape {t.shape} is not a scalar")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    if any(p.requires_grad for p in parents) and is_grad_enabled():
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ------------------------------------------------------------------ elementwise
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        a._accum(g * c)

    return _make(a.data * c, (a,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0

    def backward(g):
        x._accum(g * mask)

    return _make(x.data * mask, (x,), backward, "relu")


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)

    def backward(g):
        x._accum(g * s * (1.0 - s))

    return _make(s, (x,), backward, "sigmoid")


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        x._accum(g * _stable_sigmoid(z))

    return _make(out, (x,), backward, "softplus")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        x._accum(g * out)

    return _make(out, (x,), backward, "exp")


def log(x: Tensor, eps: float = 0.0) -> Tensor:
    z = x.data + eps if eps else x.data

    def backward(g):
        x._accum(g / z)

    return _make(np.log(z), (x,), backward, "log")


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    """Elementwise Huber-style loss: 0.5 x^2 / beta inside |x| < beta, |x| - 0.5 beta outside."""
    z = x.data
    a = np.abs(z)
    inside = a < beta
    out = np.where(inside, 0.5 * z * z / beta, a - 0.5 * beta)

    def backward(g):
        x._accum(g * np.where(inside, z / beta, np.sign(z)))

    return _make(out, (x,), backward, "smooth_l1")


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        x._accum(s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return _make(s, (x,), backward, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        s = np.exp(out)
        x._accum(g - s * g.sum(axis=-1, keepdims=True))

    return _make(out, (x,), backward, "log_softmax")


# ------------------------------------------------------------------ reductions
def reduce_sum(x: Tensor, axis=None) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            x._accum(np.broadcast_to(g, x.shape))
        else:
            x._accum(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _make(out, (x,), backward, "sum")


def reduce_mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(reduce_sum(x, axis), 1.0 / n)


# --------------------------------------------------------------------- shaping
def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        x._accum(g.reshape(x.shape))

    return _make(out, (x,), backward, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        x._accum(np.transpose(g, inv))

    return _make(out, (x,), backward, "transpose")


def index_select(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; repeated indices accumulate in the backward pass."""
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        x._accum(full)

    return _make(np.array(out, dtype=np.float64), (x,), backward, "index")


def gather_rows(x: Tensor, rows) -> Tensor:
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < -x.shape[0] or rows.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: row index out of range for {x.shape[0]} rows")
    return index_select(x, rows)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, part in zip(tensors, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                t._accum(part)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


# ---------------------------------------------------------------- linear algebra
def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} not aligned")

    def backward(g):
        if a.requires_grad:
            a._accum(g @ b.data.T)
        if b.requires_grad:
            b._accum(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias with weight shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            x._accum(g @ weight.data)
        if weight.requires_grad:
            weight._accum(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accum(g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


def const_matmul(m, x: Tensor) -> Tensor:
    """Left-multiply by a constant (dense or scipy.sparse) matrix."""
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"const_matmul: matrix {m.shape} vs input {x.shape}")
    out = np.asarray(m @ x.data)

    def backward(g):
        x._accum(np.asarray(m.T @ g))

    return _make(out, (x,), backward, "const_matmul")


# --------------------------------------------------------------- convolutions
def conv_output_size(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (N, C, H, W), weight: (O, C, k, k)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {wc}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        if weight.requires_grad:
            weight._accum((g2.T @ cols).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accum(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, backward, "conv2d")


def _pool_windows(x: Tensor, kernel: int, stride: int, op: str):
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, 0)
    wo = conv_output_size(w, kernel, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"{op}: kernel {kernel} too large for input {h}x{w}")
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win, ho, wo


def max_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    win, ho, wo = _pool_windows(x, kernel, stride, "max_pool2d")
    flat = win.reshape(*win.shape[:4], -1)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, kernel)
        nn, cc, ii, jj = np.indices(arg.shape)
        np.add.at(dx, (nn, cc, ii * stride + di, jj * stride + dj), g)
        x._accum(dx)

    return _make(out, (x,), backward, "max_pool2d")


def avg_pool2d(x: Tensor, kernel: int = 2, stride: Optional[int] = None) -> Tensor:
    stride = stride or kernel
    win, ho, wo = _pool_windows(x, kernel, stride, "avg_pool2d")
    out = win.mean(axis=(-2, -1))
    inv = 1.0 / (kernel * kernel)

    def backward(g):
        dx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * inv
        x._accum(dx)

    return _make(out, (x,), backward, "avg_pool2d")


# ------------------------------------------------------------------- backward
def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor that requires grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list = []
    seen: set = set()
    stack = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss._accum(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # release saved activations; the tape is single-use
            node._backward = None
            node._parents = ()


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|) using central differences."""
    x = Tensor(x.data.copy(), requires_grad=True)
    loss = f(x)
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    base = x.data.copy()
    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    with no_grad():
        for i in range(flat.size):
            flat[i] = base.reshape(-1)[i] + step
            fp = f(x).item()
            flat[i] = base.reshape(-1)[i] - step
            fm = f(x).item()
            flat[i] = base.reshape(-1)[i]
            numeric[i] = (fp - fm) / (2.0 * step)
    a = analytic.reshape(-1)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - numeric) / np.maximum(1.0, np.abs(a))))
