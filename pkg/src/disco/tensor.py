"""Dense tensors with reverse-mode automatic differentiation.

Data lives in row-major numpy arrays (float64 by default, float32 on
request). Every operation records its inputs and a backward rule on the
output tensor; ``backward()`` linearizes the recorded graph and replays
it in reverse, accumulating gradients in one fixed order. With identical
inputs the forward values and the gradients are therefore bit-identical
across runs.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, LabelError, UsageError

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "log",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "reduce_sum",
    "mean",
    "global_avg_pool",
    "conv2d",
    "batch_norm_2d",
    "softmax_cross_entropy",
    "finite_diff_check",
]

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values unchanged)."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


class Tensor:
    """A shaped buffer of real values, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self._consumed = False

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

    def item(self) -> float:
        if self.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got {self.shape}")
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Populate ``grad`` on every tracked tensor this scalar depends on.

        A graph can be consumed once; rebuild it (rerun the forward pass)
        before calling backward again.
        """
        if self.size != 1:
            raise UsageError("backward requires a scalar tensor")
        if self._consumed:
            raise UsageError(
                "backward was already called on this tensor; rerun the "
                "forward pass to rebuild the graph"
            )
        order = _linearize(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += g
        self._consumed = True

    # convenience wrappers
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype})"


def _linearize(root: Tensor) -> list[Tensor]:
    """Ordered list of tracked tensors reachable from root, inputs first."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def vjp(g):
        ga = _unbroadcast(g, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _make(out, (a, b), vjp)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a.dtype)
    if isinstance(b, Tensor):
        return _as_tensor(a, b.dtype), b
    return Tensor(a), Tensor(b)


def neg(x: Tensor) -> Tensor:
    def vjp(g):
        return (-g,)

    return _make(-x.data, (x,), vjp)


def power(x: Tensor, exponent: float) -> Tensor:
    """Elementwise x**exponent for a fixed real exponent."""
    out = x.data**exponent

    def vjp(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return _make(out, (x,), vjp)


def log(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _make(out, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0).astype(x.dtype)

    def vjp(g):
        return (g * mask,)

    return _make(out, (x,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")

    def vjp(g):
        return (np.ascontiguousarray(g.T),)

    return _make(np.ascontiguousarray(x.data.T), (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    old = x.shape

    def vjp(g):
        return (g.reshape(old),)

    return _make(x.data.reshape(shape), (x,), vjp)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s = reduce_sum(x, axis=axis, keepdims=keepdims)
    count = x.size // max(s.size, 1)
    return mul(s, 1.0 / count)


def global_avg_pool(x: Tensor) -> Tensor:
    """Reduce an m x c x h x w batch to m x c per-channel spatial means."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-D tensor, got {x.shape}")
    m, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape),)

    return _make(out, (x,), vjp)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    x: m x cin x h x w, kernel: cout x cin x kh x kw. Output spatial size
    is floor((h + 2*padding - kh) / stride) + 1. Implemented as an
    im2col / matmul pair; the scatter in the input backward runs over the
    kh*kw window offsets so the accumulation order is fixed.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise DimensionError(f"padding must be >= 0, got {padding}")
    m, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise DimensionError(
            f"kernel expects {cin_k} input channels, input has {cin}"
        )
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}"
        )

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = windows.shape[2], windows.shape[3]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(
        m * oh * ow, cin * kh * kw
    )
    wmat = kernel.data.reshape(cout, cin * kh * kw)
    out = np.ascontiguousarray(
        (cols @ wmat.T).reshape(m, oh, ow, cout).transpose(0, 3, 1, 2)
    )

    def vjp(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(m * oh * ow, cout)
        gk = (gm.T @ cols).reshape(cout, cin, kh, kw) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(m, oh, ow, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a : a + oh * stride : stride, b : b + ow * stride : stride] += (
                        dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gk

    return _make(out, (x, kernel), vjp)


def batch_norm_2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    eps: float = 1e-5,
    running_stats: tuple[np.ndarray, np.ndarray] | None = None,
) -> Tensor:
    """Per-channel normalization of an m x c x h x w batch.

    With ``running_stats=(mean, var)`` the given statistics are treated as
    constants (eval behaviour). Without them the batch statistics are used
    and gradients flow through them. Built from primitive ops, so the
    backward rule needs no special casing.
    """
    if x.ndim != 4:
        raise DimensionError(f"batch_norm_2d expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    g = reshape(gamma, (1, c, 1, 1))
    b = reshape(beta, (1, c, 1, 1))
    if running_stats is None:
        mu = mean(x, axis=(0, 2, 3), keepdims=True)
        centered = sub(x, mu)
        var = mean(mul(centered, centered), axis=(0, 2, 3), keepdims=True)
    else:
        rm, rv = running_stats
        mu = Tensor(rm.reshape(1, c, 1, 1).astype(x.dtype))
        var = Tensor(rv.reshape(1, c, 1, 1).astype(x.dtype))
        centered = sub(x, mu)
    inv_std = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), g), b)


def _validate_one_hot(y: np.ndarray, m: int, n: int) -> None:
    if y.ndim != 2:
        raise LabelError(f"label matrix must be 2-D, got {y.ndim}-D")
    if y.shape != (m, n):
        raise DimensionError(f"label matrix shape {y.shape} does not match ({m}, {n})")
    if not np.all((y == 0.0) | (y == 1.0)) or not np.all(y.sum(axis=1) == 1.0):
        raise LabelError("each label row must be one-hot (a single 1, rest 0)")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean categorical cross-entropy with log-sum-exp stabilization.

    ``labels`` is an m x n one-hot array (or LabelMatrix); it is constant
    with respect to the gradient.
    """
    y = np.asarray(getattr(labels, "matrix", labels), dtype=logits.dtype)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    _validate_one_hot(y, logits.shape[0], logits.shape[1])
    m = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    se = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = np.asarray(-(y * logp).sum() / m, dtype=logits.dtype)
    probs = ez / se

    def vjp(g):
        return ((probs - y) * (g / m),)

    return _make(loss, (logits,), vjp)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error uses max(|analytic|, |numeric|, 1e-12) as the
    denominator, elementwise; f must be a deterministic map from a tensor
    to a scalar tensor.
    """
    base = np.array(x.data, dtype=np.float64)
    tracked = Tensor(base.copy(), requires_grad=True)
    out = f(tracked)
    out.backward()
    analytic = tracked.grad.reshape(-1).copy()

    flat = base.reshape(-1)
    numeric = np.empty_like(flat)
    with no_grad():
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + h
            fp = f(Tensor(base)).data.item()
            flat[i] = saved - h
            fm = f(Tensor(base)).data.item()
            flat[i] = saved
            numeric[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
