"""Dense tensors with reverse-mode automatic differentiation.

Everything higher up in the package (attention blocks, matchers, the
decoder, the losses) is built from the operations in this module, so the
contract here is deliberately small and strict:

- data is a contiguous row-major float array (float64 by default,
  float32 opt-in for training runs); gradient checks require float64;
- broadcasting in binary ops is limited to leading batch axes: the
  smaller operand's shape must equal the trailing shape of the larger;
- reductions and scatter accumulations run in deterministic order, so
  repeated runs are bit-identical on one platform;
- gradients accumulate single-threaded during one backward pass.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from scipy.special import erf as _erf

DEFAULT_DTYPE = np.float64

_SQRT1_2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


def _as_array(value, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        return arr  # 0-d is trivially contiguous; keep it 0-d
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional value array with an optional gradient.

    Tensors produced by operations are treated as immutable; parameters
    are the one sanctioned mutation point (optimizers update ``data`` in
    place between backward passes).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (
                np.float32, np.float64) else DEFAULT_DTYPE
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._parents = ()
        out._backward = None
        out.requires_grad = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    @staticmethod
    def ones(shape, dtype=None, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad)

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self):
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
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """Same data, cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    # -- autodiff --------------------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:  # 0-d vs () edge
                self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += grad

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Reverse-mode pass seeding this tensor's gradient.

        Without an explicit seed the tensor must hold a single scalar.
        Topological order is computed iteratively so long unrolled clips
        do not hit the interpreter recursion limit.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.data.shape}")

        # Iterative post-order DFS.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------------

    def _wrap_operand(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        return add(self, self._wrap_operand(other))

    def __radd__(self, other):
        return add(self._wrap_operand(other), self)

    def __sub__(self, other):
        return sub(self, self._wrap_operand(other))

    def __rsub__(self, other):
        return sub(self._wrap_operand(other), self)

    def __mul__(self, other):
        return mul(self, self._wrap_operand(other))

    def __rmul__(self, other):
        return mul(self._wrap_operand(other), self)

    def __truediv__(self, other):
        return div(self, self._wrap_operand(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    # method aliases used all over the model code
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable tensor; mounted into a module tree under a unique name.

    Shared-weight blocks must hold the *same* Parameter object, so the
    checkpoint writer emits one copy and mutation affects every user.
    """

    __slots__ = ("name",)

    def __init__(self, data, dtype=None, name: str = ""):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


def constant(value, dtype=None) -> Tensor:
    return Tensor(np.asarray(value, dtype=dtype or DEFAULT_DTYPE))


# -- broadcasting helpers -------------------------------------------------------


def _check_leading_broadcast(a_shape, b_shape) -> None:
    """Binary ops broadcast only over leading batch axes."""
    small, big = (a_shape, b_shape) if len(a_shape) <= len(b_shape) else (b_shape, a_shape)
    k = len(small)
    if k > 0 and tuple(big[len(big) - k:]) != tuple(small):
        raise ShapeError(
            f"shapes {a_shape} and {b_shape} do not align on trailing axes "
            "(broadcasting is limited to leading batch axes)")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum out the leading axes added by broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


# -- elementwise binary ops ------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_leading_broadcast(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return Tensor._from_op(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar without creating a constant tensor."""
    s = a.data.dtype.type(s)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return Tensor._from_op(a.data * s, (a,), backward)


def pow_scalar(a: Tensor, p: float) -> Tensor:
    out = a.data ** p

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return Tensor._from_op(out, (a,), backward)


# -- shape ops --------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = np.reshape(a.data, shape)

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.reshape(g, a.data.shape))

    return Tensor._from_op(np.ascontiguousarray(out), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(int(ax) for ax in axes)
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(a.data, axes))

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.ascontiguousarray(np.transpose(g, inv)))

    return Tensor._from_op(out, (a,), backward)


def swap_last2(a: Tensor) -> Tensor:
    """Transpose the trailing two axes (matmul companion)."""
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    axis = int(axis)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                t._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return Tensor._from_op(out, tuple(tensors), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    axis, start, length = int(axis), int(start), int(length)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start}:{start + length}] out of range for axis {axis} of {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    out = np.ascontiguousarray(a.data[tuple(sl)])

    def backward(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[tuple(sl)] = g
            a._accumulate(full)

    return Tensor._from_op(out, (a,), backward)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast to a larger shape; gradient sums the expanded axes."""
    shape = tuple(int(s) for s in shape)
    out = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    extra = len(shape) - a.ndim
    # axes that were newly added or stretched from size 1
    summed_axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(a.shape) if s == 1 and shape[extra + i] != 1)
    keep_axes = tuple(i + extra for i, s in enumerate(a.shape) if s == 1 and shape[extra + i] != 1)

    def backward(g):
        if a.requires_grad:
            red = g.sum(axis=summed_axes, keepdims=False) if summed_axes else g
            a._accumulate(red.reshape(a.data.shape))

    _ = keep_axes
    return Tensor._from_op(out, (a,), backward)


# -- reductions ---------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return Tensor._from_op(out, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    out = a.data.mean(axis=axes, keepdims=keepdims)
    out = np.asarray(out, dtype=a.data.dtype)
    inv = a.data.dtype.type(1.0 / count)

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axes)
            a._accumulate(np.broadcast_to(gg * inv, a.data.shape).copy())

    return Tensor._from_op(out, (a,), backward)


# -- elementwise nonlinear ops ----------------------------------------------------


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return Tensor._from_op(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._from_op(out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out)

    return Tensor._from_op(out, (a,), backward)


def _sigmoid_grad(out_data: np.ndarray, g: np.ndarray) -> np.ndarray:
    # module-level so the selftest mutation fixture can patch it
    return g * out_data * (1.0 - out_data)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_sigmoid_grad(out, g))

    return Tensor._from_op(out, (a,), backward)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _SQRT1_2))
    out = x * cdf

    def backward(g):
        if a.requires_grad:
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
            a._accumulate(g * (cdf + x * pdf))

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (a,), backward)


def clip_min(a: Tensor, lo: float) -> Tensor:
    """Lower clamp; gradient passes through only where unclamped."""
    mask = a.data >= lo
    out = np.maximum(a.data, a.data.dtype.type(lo))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return Tensor._from_op(out, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    axis = int(axis) % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            a._accumulate(out * (g - dot))

    return Tensor._from_op(out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized log of the softmax along one axis.

    Computed directly from shifted inputs, so a very negative logit
    yields a very negative output instead of log(0), and its gradient
    stays finite.
    """
    axis = int(axis) % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError(f"log_softmax over an empty axis {axis} of shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing (channel) axis to zero mean / unit variance.

    Zero-variance inputs map to the bias (the eps keeps the denominator
    finite), then the affine (gain, bias) is applied.
    """
    c = a.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} != ({c},)")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.data.dtype.type(eps))
    xn = xc * inv
    out = xn * gain.data + bias.data

    def backward(g):
        if a.requires_grad:
            dxn = g * gain.data
            term = dxn - dxn.mean(axis=-1, keepdims=True) - xn * (dxn * xn).mean(axis=-1, keepdims=True)
            a._accumulate(term * inv)
        red = tuple(range(a.ndim - 1))
        if gain.requires_grad:
            gain._accumulate((g * xn).sum(axis=red))
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=red))

    return Tensor._from_op(out, (a, gain, bias), backward)


# -- matmul -------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the trailing two axes.

    Leading batch axes must match or be absent on one side.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeError(f"matmul batch extents differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            if ga.ndim > a.ndim:
                ga = ga.sum(axis=tuple(range(ga.ndim - a.ndim)))
            a._accumulate(ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            if gb.ndim > b.ndim:
                gb = gb.sum(axis=tuple(range(gb.ndim - b.ndim)))
            b._accumulate(gb)

    return Tensor._from_op(out, (a, b), backward)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs dot products between two token sets, out[i, j] = a_i . b_j.

    No magnitude scaling is applied. The forward pass accumulates each
    entry independently in channel order (not a blocked GEMM), so
    pairwise_dot(x, x) is bitwise symmetric: entries (i, j) and (j, i)
    sum the same products in the same order.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_dot expects [n, c] x [m, c], got {a.shape} and {b.shape}")
    out = np.einsum("ic,jc->ij", a.data, b.data, optimize=False)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data)
        if b.requires_grad:
            b._accumulate(g.T @ a.data)

    return Tensor._from_op(np.ascontiguousarray(out), (a, b), backward)


# -- convolution / resampling --------------------------------------------------------


def conv_output_size(extent: int, kernel: int, stride: int, padding: int, dilation: int = 1) -> int:
    eff = dilation * (kernel - 1) + 1
    out = (extent + 2 * padding - eff) // stride + 1
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Unfold [C, H, W] into [C*kh*kw, oh*ow] patch columns.

    Row order is (channel, kernel row, kernel col), matching the
    flattened weight layout. One strided copy per kernel offset.
    """
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            di, dj = i * dilation, j * dilation
            cols[:, i, j] = xp[:, di:di + (oh - 1) * stride + 1:stride,
                               dj:dj + (ow - 1) * stride + 1:stride]
    return cols.reshape(cin * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, dilation: int = 1) -> Tensor:
    """2-d cross-correlation, x: [C_in, H, W], weight: [C_out, C_in, kh, kw]."""
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects [C,H,W] x [Co,Ci,kh,kw], got {x.shape} and {weight.shape}")
    cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {weight.shape}")
    oh = conv_output_size(h, kh, stride, padding, dilation)
    ow = conv_output_size(w, kw, stride, padding, dilation)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d kernel {kh}x{kw} (dilation {dilation}) larger than padded input {h}x{w} (padding {padding})")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, dilation, oh, ow)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, oh, ow))

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.reshape(cout, oh * ow)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gm.sum(axis=1))
        if weight.requires_grad:
            weight._accumulate((gm @ cols.T).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = (wmat.T @ gm).reshape(cin, kh, kw, oh, ow)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    di, dj = i * dilation, j * dilation
                    gxp[:, di:di + (oh - 1) * stride + 1:stride,
                        dj:dj + (ow - 1) * stride + 1:stride] += dcols[:, i, j]
            if padding:
                gxp = gxp[:, padding:padding + h, padding:padding + w]
            x._accumulate(np.ascontiguousarray(gxp))

    return Tensor._from_op(out, parents, backward)


def _resize_axis_indices(n_in: int, n_out: int, dtype):
    """align_corners=False source indices and blend weights for one axis."""
    pos = (np.arange(n_out, dtype=dtype) + dtype(0.5)) * (n_in / n_out) - dtype(0.5)
    lo = np.floor(pos)
    frac = pos - lo
    i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
    i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
    frac = np.clip(frac, 0.0, 1.0)
    return i0, i1, frac


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling of [C, H, W] maps, align-corners-false convention."""
    if x.ndim != 3:
        raise ShapeError(f"bilinear_resize expects [C,H,W], got {x.shape}")
    out_h, out_w = int(out_h), int(out_w)
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize target {out_h}x{out_w} must be positive")
    c, h, w = x.shape
    if (out_h, out_w) == (h, w):
        def backward_id(g):
            if x.requires_grad:
                x._accumulate(g)
        return Tensor._from_op(x.data.copy(), (x,), backward_id)

    dt = x.data.dtype.type
    y0, y1, fy = _resize_axis_indices(h, out_h, dt)
    x0, x1, fx = _resize_axis_indices(w, out_w, dt)
    wy0, wy1 = (1.0 - fy)[None, :, None], fy[None, :, None]
    wx0, wx1 = (1.0 - fx)[None, None, :], fx[None, None, :]

    d = x.data
    out = (d[:, y0][:, :, x0] * (wy0 * wx0)
           + d[:, y0][:, :, x1] * (wy0 * wx1)
           + d[:, y1][:, :, x0] * (wy1 * wx0)
           + d[:, y1][:, :, x1] * (wy1 * wx1))
    out = np.ascontiguousarray(np.asarray(out, dtype=x.data.dtype))

    def backward(g):
        if not x.requires_grad:
            return
        gx = np.zeros_like(x.data)
        yy0 = np.repeat(y0, out_w)
        yy1 = np.repeat(y1, out_w)
        xx0 = np.tile(x0, out_h)
        xx1 = np.tile(x1, out_h)
        gf = g.reshape(c, -1)
        wyx = [
            (yy0, xx0, (wy0 * wx0).reshape(-1)),
            (yy0, xx1, (wy0 * wx1).reshape(-1)),
            (yy1, xx0, (wy1 * wx0).reshape(-1)),
            (yy1, xx1, (wy1 * wx1).reshape(-1)),
        ]
        for yy, xx, ww in wyx:
            np.add.at(gx, (slice(None), yy, xx), gf * ww[None, :])
        x._accumulate(gx)

    return Tensor._from_op(out, (x,), backward)


# -- verification ----------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between reverse-mode and central finite differences.

    The relative error uses a unit floor, |ad - fd| / max(|ad|, |fd|, 1),
    so coordinates with near-zero gradient are judged on absolute error.
    With ``max_coords`` set, a deterministic random subset of coordinates
    is probed (for whole-model checks where full sweeps are too slow).
    """
    if x.data.dtype != np.float64:
        raise ValueError("grad_check requires float64 inputs")
    base = Tensor(x.data.copy(), requires_grad=True)
    out = f(base)
    if out.size != 1:
        raise ValueError("grad_check target must return a scalar")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value in grad_check")
    out.backward()
    analytic = base.grad.copy() if base.grad is not None else np.zeros_like(base.data)

    flat = base.data.reshape(-1)
    n = flat.size
    if max_coords is not None and max_coords < n:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(n, size=max_coords, replace=False))
    else:
        coords = np.arange(n)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        with no_grad():
            f_plus = f(Tensor(base.data)).item()
        flat[idx] = orig - eps
        with no_grad():
            f_minus = f(Tensor(base.data)).item()
        flat[idx] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError("non-finite function value in grad_check")
        fd = (f_plus - f_minus) / (2.0 * eps)
        ad = a_flat[idx]
        rel = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
        worst = max(worst, rel)
    return worst
