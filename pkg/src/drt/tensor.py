"""Dense float64 tensors with tape-free reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to one gradient per
parent. :func:`backward` walks the graph in reverse topological order and
accumulates into the ``grad`` buffer of leaf tensors that require gradients
(normally :class:`Parameter` objects).

Convolution uses cross-correlation (no kernel flip) and an im2col layout so
that the inner work is a handful of BLAS calls.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(data: np.ndarray, what: str) -> None:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {what}")


class Tensor:
    """A float64 array node in a differentiation graph.

    Parameters
    ----------
    data : array_like
        Values; copied to a C-contiguous float64 array.
    requires_grad : bool
        Whether gradients should flow to (and accumulate in) this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._op = "leaf"

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        """Wrap an op result, linking it into the graph when needed."""
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

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
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = "detach"
        return t

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # -- operators -----------------------------------------------------
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

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named leaf tensor that always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple, b: tuple, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a} and {b} are not compatible") from exc


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (np.sign(ad) * g,), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NumericError("log of a non-positive value")
    return Tensor._make(np.log(x), (a,), lambda g: (g / x,), "log")


def clip_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)`` elementwise; the gradient is zero where clamped."""
    mask = a.data > floor
    return Tensor._make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clip_min")


def softmax(a: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._make(out, (a,), bw, "softmax")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {shape}") from exc
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise DimensionError("transpose needs at least 2 dimensions")
    return Tensor._make(np.swapaxes(a.data, -1, -2), (a,),
                        lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(out, tuple(tensors),
                        lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy ``@`` semantics for operands of rank >= 2."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return Tensor._make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for weight stored as [out, in]."""
    out = matmul(x, transpose(weight))
    return add(out, bias) if bias is not None else out


def global_avg_pool(x: Tensor) -> Tensor:
    """[B, C, H, W] -> [B, C] spatial mean."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [B,C,H,W], got {x.shape}")
    return mean(x, axis=(2, 3))


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` average pooling (trailing rows dropped)."""
    if x.ndim != 4:
        raise DimensionError(f"avg_pool2d expects [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    if Ho == 0 or Wo == 0:
        raise DimensionError(f"avg_pool2d: window {size} larger than input {H}x{W}")
    xd = x.data
    inv = 1.0 / (size * size)
    out = np.zeros((B, C, Ho, Wo))
    for i in range(size):
        for j in range(size):
            out += xd[:, :, i:Ho * size:size, j:Wo * size:size]
    out *= inv

    def bw(g):
        full = np.zeros((B, C, H, W))
        gs = g * inv
        for i in range(size):
            for j in range(size):
                full[:, :, i:Ho * size:size, j:Wo * size:size] = gs
        return (full,)

    return Tensor._make(out, (x,), bw, "avg_pool2d")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, padding: int):
    """[B,C,H,W] -> ([B, C*k*k, Ho*Wo], padded shape, Ho, Wo)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * k * k, Ho * Wo)
    return cols, x.shape, Ho, Wo


def _col2im(dcols: np.ndarray, padded_shape, k: int, stride: int, padding: int, Ho: int, Wo: int):
    B, C, Hp, Wp = padded_shape
    d = dcols.reshape(B, C, k, k, Ho, Wo)
    dx = np.zeros(padded_shape)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[:, :, i, j]
    if padding:
        dx = dx[:, :, padding:Hp - padding, padding:Wp - padding]
    return dx


def _check_conv(x: Tensor, kshape: tuple, stride: int, padding: int, per_sample: bool):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [B,Cin,H,W], got {x.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d requires stride >= 1 and padding >= 0")
    k = kshape[-1]
    if kshape[-2] != k:
        raise DimensionError("only square kernels are supported")
    cin = kshape[-3]
    if cin != x.shape[1]:
        raise DimensionError(f"conv2d: kernel expects {cin} input channels, input has {x.shape[1]}")
    if per_sample and kshape[0] != x.shape[0]:
        raise DimensionError("per-sample kernels must match the batch size")
    H, W = x.shape[2:]
    if k > H + 2 * padding or k > W + 2 * padding:
        raise DimensionError(f"kernel {k} larger than padded input {H}x{W}+2*{padding}")
    return k


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` [B,Cin,H,W] with ``kernel`` [Cout,Cin,k,k]."""
    if kernel.ndim != 4:
        raise DimensionError(f"kernel must be [Cout,Cin,k,k], got {kernel.shape}")
    k = _check_conv(x, kernel.shape, stride, padding, per_sample=False)
    cout = kernel.shape[0]
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},)")
    cols, pshape, Ho, Wo = _im2col(x.data, k, stride, padding)
    wmat = kernel.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    B = x.shape[0]
    kshape = kernel.shape

    def bw(g):
        g = g.reshape(B, cout, Ho * Wo)
        gx = _col2im(np.matmul(wmat.T, g), pshape, k, stride, padding, Ho, Wo) if x.requires_grad else None
        gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kshape) if kernel.requires_grad else None
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._make(out.reshape(B, cout, Ho, Wo), parents, bw, "conv2d")


def conv2d_per_sample(x: Tensor, kernels: Tensor, bias: Optional[Tensor] = None,
                      stride: int = 1, padding: int = 0) -> Tensor:
    """Convolve sample ``b`` of ``x`` with its own kernel ``kernels[b]``.

    ``kernels`` has shape [B,Cout,Cin,k,k]; ``bias`` (shared) has shape [Cout].
    Equivalent to stacking ``conv2d(x[b:b+1], kernels[b], bias)`` over b.
    """
    if kernels.ndim != 5:
        raise DimensionError(f"per-sample kernels must be [B,Cout,Cin,k,k], got {kernels.shape}")
    k = _check_conv(x, kernels.shape, stride, padding, per_sample=True)
    B, cout = kernels.shape[:2]
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"bias must have shape ({cout},)")
    cols, pshape, Ho, Wo = _im2col(x.data, k, stride, padding)
    wmat = kernels.data.reshape(B, cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    kshape = kernels.shape

    def bw(g):
        g = g.reshape(B, cout, Ho * Wo)
        gx = None
        if x.requires_grad:
            gx = _col2im(np.matmul(np.swapaxes(wmat, 1, 2), g), pshape, k, stride, padding, Ho, Wo)
        gk = np.matmul(g, np.swapaxes(cols, 1, 2)).reshape(kshape) if kernels.requires_grad else None
        grads = (gx, gk)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 2)),)
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return Tensor._make(out.reshape(B, cout, Ho, Wo), parents, bw, "conv2d_per_sample")


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every reachable leaf.

    Repeated calls accumulate; zero gradients explicitly between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
