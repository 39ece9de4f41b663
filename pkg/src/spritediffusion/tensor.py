"""Minimal n-dimensional tensor with reverse-mode autodiff on a per-forward tape.

The op set is exactly what the denoiser, encoders and losses need: elementwise
arithmetic, silu/exp/log/sqrt/square, matmul, conv2d, reductions, softmax /
log-softmax, group norm, mse, plus the structural ops (reshape, permute,
concat, narrow, embedding gather, nearest upsample). Broadcasting follows
numpy's trailing-dimension rules; nothing more general is supported.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "silu",
    "exp",
    "log",
    "sqrt",
    "square",
    "matmul",
    "conv2d",
    "mean",
    "tsum",
    "softmax",
    "log_softmax",
    "group_norm",
    "mse",
    "reshape",
    "permute",
    "concat",
    "narrow",
    "embedding",
    "upsample_nearest2",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """Input outside the mathematical domain of the op (log/sqrt of negatives)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported element type {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily switch the whole stack's element type (float64 for gradient checks)."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; inference paths use this to skip closure bookkeeping."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense array plus optional gradient buffer and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None
        self.name = name

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

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        nm = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{req}{nm})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def _ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def backward(self, grad: Optional[np.ndarray] = None, free_graph: bool = True) -> None:
        """Reverse-mode sweep from this tensor; gradients accumulate into .grad.

        The tape is freed afterwards (closures dropped) unless free_graph=False.
        Calling twice without zeroing accumulates, per contract.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without seed requires a scalar tensor")
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(grad, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(f"seed shape {seed.shape} != tensor shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError("backward() on non-finite tensor")

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))

        g = self._ensure_grad()
        g += seed
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
            if free_graph:
                node._backward = None
                node._parents = ()
                if not node.requires_grad:
                    node.grad = None

    # operator sugar; scalars are promoted to plain arrays
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Optional[Callable[[Tensor], Callable[[], None]]]) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents)
    out = Tensor(data)
    if requires and backward is not None:
        out.requires_grad = False  # interior node; leaves keep their own flag
        out._parents = tuple(parents)
        out._backward = backward(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ts) in enumerate(zip(g.shape, shape)):
        if ts == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad += _unbroadcast(out.grad, b.shape)
        return run

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += _unbroadcast(out.grad, a.shape)
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad -= _unbroadcast(out.grad, b.shape)
        return run

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += _unbroadcast(out.grad * b.data, a.shape)
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad += _unbroadcast(out.grad * a.data, b.shape)
        return run

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "div")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += _unbroadcast(out.grad / b.data, a.shape)
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape)
        return run

    return _make(a.data / b.data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad * s
        return run

    return _make(a.data * s, (a,), bw)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad * (sig * (1.0 + a.data * (1.0 - sig)))
        return run

    return _make(a.data * sig, (a,), bw)


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad * y
        return run

    return _make(y, (a,), bw)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad / a.data
        return run

    return _make(np.log(a.data), (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt: input must be non-negative")
    y = np.sqrt(a.data)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad * (0.5 / y)
        return run

    return _make(y, (a,), bw)


def square(a: Tensor) -> Tensor:
    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad * (2.0 * a.data)
        return run

    return _make(a.data * a.data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad @ b.data.T
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad += a.data.T @ out.grad
        return run

    return _make(a.data @ b.data, (a, b), bw)


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OCKhKw kernels.

    Internally runs channels-last shift-and-matmul (one GEMM per kernel tap),
    which is the fast layout for BLAS at sprite scale.
    """
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and k, got {x.shape}, {k.shape}")
    b, c, h, w = x.shape
    o, ck, kh, kw = k.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel expects {ck}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d invalid stride/pad ({stride}, {pad})")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1 or (h + 2 * pad - kh) % stride or (w + 2 * pad - kw) % stride:
        raise ShapeError(
            f"conv2d spatial dims incompatible: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}"
        )

    xp = x.data.transpose(0, 2, 3, 1)  # NHWC
    if pad:
        xp = np.pad(xp, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    xp = np.ascontiguousarray(xp)
    kcl = np.ascontiguousarray(k.data.transpose(2, 3, 1, 0))  # kh,kw,c,o

    out_flat = np.zeros((b * oh * ow, o), dtype=x.data.dtype)
    for dy in range(kh):
        for dx in range(kw):
            patch = xp[:, dy : dy + (oh - 1) * stride + 1 : stride, dx : dx + (ow - 1) * stride + 1 : stride, :]
            out_flat += patch.reshape(-1, c) @ kcl[dy, dx]
    y = out_flat.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)

    def bw(out):
        def run():
            g = np.ascontiguousarray(out.grad.transpose(0, 2, 3, 1)).reshape(-1, o)
            if k.requires_grad or k._parents:
                k._ensure_grad()
                dk = np.empty_like(kcl)
                for dy in range(kh):
                    for dx in range(kw):
                        patch = xp[:, dy : dy + (oh - 1) * stride + 1 : stride, dx : dx + (ow - 1) * stride + 1 : stride, :]
                        dk[dy, dx] = patch.reshape(-1, c).T @ g
                k.grad += dk.transpose(3, 2, 0, 1)
            if x.requires_grad or x._parents:
                x._ensure_grad()
                dxp = np.zeros_like(xp)
                for dy in range(kh):
                    for dx in range(kw):
                        contrib = (g @ kcl[dy, dx].T).reshape(b, oh, ow, c)
                        dxp[:, dy : dy + (oh - 1) * stride + 1 : stride, dx : dx + (ow - 1) * stride + 1 : stride, :] += contrib
                if pad:
                    dxp = dxp[:, pad : pad + h, pad : pad + w, :]
                x.grad += dxp.transpose(0, 3, 1, 2)
        return run

    return _make(np.ascontiguousarray(y), (x, k), bw)


# ---------------------------------------------------------------------------
# reductions and normalizers


def _norm_axis(axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    axis = tuple(ax if ax >= 0 else ax + ndim for ax in axis)
    for ax in axis:
        if not 0 <= ax < ndim:
            raise ShapeError(f"axis {ax} invalid for ndim {ndim}")
    return axis


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a.grad += np.broadcast_to(g, a.shape)
        return run

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axis = _norm_axis(axis, a.ndim)
    if axis is None:
        n = a.size
    else:
        n = int(np.prod([a.shape[ax] for ax in axis]))

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a.grad += np.broadcast_to(g, a.shape) / a.data.dtype.type(n)
        return run

    return _make(a.data.mean(axis=axis, keepdims=keepdims), (a,), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                dot = (out.grad * y).sum(axis=ax, keepdims=True)
                a.grad += y * (out.grad - dot)
        return run

    return _make(y, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, a.ndim)
    z = a.data - a.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                gsum = out.grad.sum(axis=ax, keepdims=True)
                a.grad += out.grad - np.exp(y) * gsum
        return run

    return _make(y, (a,), bw)


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-group normalization over (C/G, H, W); affine applied per channel."""
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW, got {x.shape}")
    b, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"groups {groups} must divide channels {c}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    xg = x.data.reshape(b, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = ((xg - mu) * inv).reshape(b, c, h, w)
    y = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def bw(out):
        def run():
            g = out.grad
            if gamma.requires_grad or gamma._parents:
                gamma._ensure_grad()
                gamma.grad += (g * xhat).sum(axis=(0, 2, 3))
            if beta.requires_grad or beta._parents:
                beta._ensure_grad()
                beta.grad += g.sum(axis=(0, 2, 3))
            if x.requires_grad or x._parents:
                x._ensure_grad()
                dxhat = (g * gamma.data.reshape(1, c, 1, 1)).reshape(b, groups, -1)
                xh = xhat.reshape(b, groups, -1)
                m1 = dxhat.mean(axis=2, keepdims=True)
                m2 = (dxhat * xh).mean(axis=2, keepdims=True)
                dx = inv * (dxhat - m1 - xh * m2)
                x.grad += dx.reshape(b, c, h, w)
        return run

    return _make(y, (x, gamma, beta), bw)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = a.data.dtype.type(a.size)

    def bw(out):
        def run():
            coeff = out.grad * (2.0 / n)
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += coeff * diff
            if b.requires_grad or b._parents:
                b._ensure_grad()
                b.grad -= coeff * diff
        return run

    return _make(np.asarray((diff * diff).mean()), (a, b), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad.reshape(a.shape)
        return run

    return _make(a.data.reshape(shape), (a,), bw)


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad += out.grad.transpose(inv)
        return run

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bw)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    (ax,) = _norm_axis(axis, parts[0].ndim)
    sizes = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        def run():
            for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad or p._parents:
                    p._ensure_grad()
                    idx = [slice(None)] * p.ndim
                    idx[ax] = slice(int(start), int(stop))
                    p.grad += out.grad[tuple(idx)]
        return run

    return _make(np.concatenate([p.data for p in parts], axis=ax), tuple(parts), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    (ax,) = _norm_axis(axis, a.ndim)
    if start < 0 or start + length > a.shape[ax]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of bounds for axis {ax} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, start + length)
    idx = tuple(idx)

    def bw(out):
        def run():
            if a.requires_grad or a._parents:
                a._ensure_grad()
                a.grad[idx] += out.grad
        return run

    return _make(np.ascontiguousarray(a.data[idx]), (a,), bw)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather from a (vocab, dim) table; backward scatter-adds."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding ids out of vocabulary range")

    def bw(out):
        def run():
            if table.requires_grad or table._parents:
                table._ensure_grad()
                np.add.at(table.grad, ids.reshape(-1), out.grad.reshape(-1, table.shape[1]))
        return run

    return _make(table.data[ids], (table,), bw)


def upsample_nearest2(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"upsample expects NCHW, got {x.shape}")
    b, c, h, w = x.shape
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bw(out):
        def run():
            if x.requires_grad or x._parents:
                x._ensure_grad()
                g = out.grad.reshape(b, c, h, 2, w, 2)
                x.grad += g.sum(axis=(3, 5))
        return run

    return _make(y, (x,), bw)
