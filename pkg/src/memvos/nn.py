"""Reusable network blocks on top of the tensor core.

Conventions used throughout the model code:

- spatial feature maps are [C, H, W];
- token matrices are [N, C], one row per spatial position or per
  learned token;
- modules hold :class:`Parameter` objects and are callable; weight
  initialization draws from an rng handed to the constructor, so a
  seeded build is reproducible bit for bit.
"""

from __future__ import annotations

from typing import Iterator, Optional, Sequence

import numpy as np

from memvos import autodiff as ad
from memvos.autodiff import Parameter, Tensor


class Module:
    """Base class: walks attributes to find parameters and submodules."""

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        """Yield (path, parameter) pairs in attribute insertion order.

        A parameter object shared between two paths is yielded once per
        path; consumers that need uniqueness dedupe by object identity.
        """
        for name, value in self._children():
            path = f"{prefix}.{name}" if prefix else name
            if isinstance(value, Parameter):
                yield path, value
            else:
                yield from value.named_parameters(path)

    def parameters(self) -> list[Parameter]:
        """Unique parameter objects, first-path order."""
        seen: set[int] = set()
        out: list[Parameter] = []
        for _, p in self.named_parameters():
            if id(p) not in seen:
                seen.add(id(p))
                out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _init_weight(rng: np.random.Generator, shape, fan_in: int,
                 gain: float = 1.0) -> np.ndarray:
    # uniform with Var = gain^2 / fan_in, keeping activation scale
    # roughly constant through depth
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Affine map on the trailing axis: y = x W + b."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_init_weight(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    """2-d convolution module over [C, H, W] maps."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 dilation: int = 1, bias: bool = True):
        k = int(kernel_size)
        fan_in = in_channels * k * k
        # gain sqrt(2) compensates the halving a GELU applies to
        # small-signal activations
        self.weight = Parameter(_init_weight(rng, (out_channels, in_channels, k, k),
                                             fan_in, gain=np.sqrt(2.0)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None
        self.stride = int(stride)
        self.padding = int(padding)
        self.dilation = int(dilation)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=self.stride,
                         padding=self.padding, dilation=self.dilation)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(features))
        self.bias = Parameter(np.zeros(features))
        self.eps = float(eps)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, eps=self.eps)


# -- token/map plumbing --------------------------------------------------------


def map_to_tokens(x: Tensor) -> Tensor:
    """[C, H, W] -> [H*W, C], row-major spatial order."""
    c, h, w = x.shape
    return ad.transpose(x.reshape(c, h * w), (1, 0))


def tokens_to_map(t: Tensor, height: int, width: int) -> Tensor:
    """[H*W, C] -> [C, H, W]."""
    n, c = t.shape
    if n != height * width:
        raise ad.ShapeError(f"{n} tokens cannot fill a {height}x{width} map")
    return ad.transpose(t, (1, 0)).reshape(c, height, width)


# -- attention ------------------------------------------------------------------


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over the trailing two axes.

    q: [..., nq, d], k: [..., nk, d], v: [..., nk, dv]. Scores are
    scaled by 1/sqrt(d) before the row softmax.
    """
    d = q.shape[-1]
    # python-float scale: a numpy scalar here would widen float32 inputs
    scores = ad.scale(ad.matmul(q, ad.swap_last2(k)), 1.0 / float(np.sqrt(d)))
    return ad.matmul(ad.softmax(scores, axis=-1), v)


def average_pool_tokens(t: Tensor, height: int, width: int, ratio: int) -> Tensor:
    """Average [H*W, C] tokens over non-overlapping ratio x ratio blocks.

    The token grid extents must be divisible by the ratio; ratio 1 is
    the identity.
    """
    ratio = int(ratio)
    if ratio == 1:
        return t
    n, c = t.shape
    if n != height * width:
        raise ad.ShapeError(f"{n} tokens cannot fill a {height}x{width} grid")
    if height % ratio or width % ratio:
        raise ad.ShapeError(
            f"token grid {height}x{width} not divisible by pooling ratio {ratio}")
    blocked = t.reshape(height // ratio, ratio, width // ratio, ratio, c)
    pooled = ad.tmean(blocked, axis=(1, 3))
    return pooled.reshape((height // ratio) * (width // ratio), c)


def average_pool_map(x: Tensor, ratio: int) -> Tensor:
    """Average a [C, H, W] map over non-overlapping ratio x ratio blocks."""
    ratio = int(ratio)
    if ratio == 1:
        return x
    c, h, w = x.shape
    if h % ratio or w % ratio:
        raise ad.ShapeError(f"map {h}x{w} not divisible by pooling ratio {ratio}")
    blocked = x.reshape(c, h // ratio, ratio, w // ratio, ratio)
    return ad.tmean(blocked, axis=(2, 4))


def ss_attention(q: Tensor, k: Tensor, v: Tensor, kv_height: int, kv_width: int,
                 reduction_ratio: int = 1) -> Tensor:
    """Projection-free attention with spatially reduced keys and values.

    Keys and values are average-pooled over ``reduction_ratio`` square
    blocks of their token grid before plain attention; ratio 1 matches
    plain attention exactly.
    """
    if reduction_ratio == 1:
        return attention(q, k, v)
    ks = average_pool_tokens(k, kv_height, kv_width, reduction_ratio)
    vs = average_pool_tokens(v, kv_height, kv_width, reduction_ratio)
    return attention(q, ks, vs)


class MultiHeadAttention(Module):
    """Projected multi-head attention over token matrices.

    Query tokens are [nq, dim] or batched [B, nq, dim]; key/value
    tokens follow the same layout with kv_dim channels. Heads are
    carved out of the projected channel axis by reshape, so dim must
    divide evenly.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator,
                 kv_dim: Optional[int] = None):
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        kv_dim = kv_dim if kv_dim is not None else dim
        self.num_heads = int(num_heads)
        self.head_dim = dim // num_heads
        self.proj_q = Linear(dim, dim, rng)
        self.proj_k = Linear(kv_dim, dim, rng)
        self.proj_v = Linear(kv_dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        if t.ndim == 2:
            n = t.shape[0]
            return ad.transpose(t.reshape(n, self.num_heads, self.head_dim), (1, 0, 2))
        b, n = t.shape[0], t.shape[1]
        return ad.transpose(t.reshape(b, n, self.num_heads, self.head_dim), (0, 2, 1, 3))

    def _merge(self, t: Tensor) -> Tensor:
        if t.ndim == 3:
            n = t.shape[1]
            return ad.transpose(t, (1, 0, 2)).reshape(n, self.num_heads * self.head_dim)
        b, n = t.shape[0], t.shape[2]
        return ad.transpose(t, (0, 2, 1, 3)).reshape(b, n, self.num_heads * self.head_dim)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        heads = attention(self._split(self.proj_q(q)),
                          self._split(self.proj_k(k)),
                          self._split(self.proj_v(v)))
        return self.proj_out(self._merge(heads))


class FeedForward(Module):
    """Token-wise two-layer MLP with GELU, hidden width = mult * dim."""

    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 2):
        self.fc1 = Linear(dim, mult * dim, rng)
        self.fc2 = Linear(mult * dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class SelfAttentionBlock(Module):
    """Post-norm transformer block: MHA + residual + LN, FFN + residual + LN."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator, ffn_mult: int = 2):
        self.attn = MultiHeadAttention(dim, num_heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, rng, mult=ffn_mult)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.norm1(x + self.attn(x, x, x))
        return self.norm2(x + self.ffn(x))


# -- convolutional blocks ----------------------------------------------------------


class ResidualBlock(Module):
    """Two 3x3 convs with a skip; optional strided entry reprojects the skip."""

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, stride: int = 1):
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, stride=1, padding=1)
        if stride != 1 or in_channels != out_channels:
            self.skip = Conv2d(in_channels, out_channels, 1, rng, stride=stride, padding=0)
        else:
            self.skip = None

    def __call__(self, x: Tensor) -> Tensor:
        y = self.conv2(ad.gelu(self.conv1(x)))
        s = x if self.skip is None else self.skip(x)
        return ad.gelu(y + s)


class SpatialPyramidPooling(Module):
    """Multi-rate context pooling over one feature map.

    Parallel branches (1x1 conv, dilated 3x3 convs, a global-average
    pathway broadcast back over the grid) are concatenated and fused by
    a 1x1 projection. Output keeps the input spatial extent.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, dilations: Sequence[int] = (1, 2, 4)):
        self.point = Conv2d(in_channels, out_channels, 1, rng)
        self.dilated = [
            Conv2d(in_channels, out_channels, 3, rng, padding=d, dilation=d)
            for d in dilations
        ]
        self.global_proj = Linear(in_channels, out_channels, rng)
        self.fuse = Conv2d(out_channels * (len(dilations) + 2), out_channels, 1, rng)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        branches = [ad.gelu(self.point(x))]
        for conv in self.dilated:
            branches.append(ad.gelu(conv(x)))
        pooled = self.global_proj(x.reshape(c, h * w).mean(axis=1, keepdims=False).reshape(1, c))
        gc = pooled.shape[1]
        branches.append(ad.gelu(ad.expand(ad.transpose(pooled, (1, 0)).reshape(gc, 1, 1), (gc, h, w))))
        return ad.gelu(self.fuse(ad.concat(branches, axis=0)))


class Upsample2x(Module):
    """Bilinear 2x upsampling followed by a 3x3 conv."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        return ad.gelu(self.conv(ad.bilinear_resize(x, 2 * h, 2 * w)))
