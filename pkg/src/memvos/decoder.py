"""Compensatory two-pass decoding from matched tokens to object masks.

A plain decoder pass (the "base" pass) upsamples the matched readout
map through three stages with encoder skips. What it loses, a second
pass tries to put back: multi-rate pooled prompts from each base stage
feed a context chain that starts from the raw frame, the chain's final
state is folded back into the readout tokens, and the second decode
runs through the *same* upsampling blocks (shared parameter objects,
not copies). At every stage a learned per-channel gate blends the two
passes, so each channel of the result sits between its base-pass and
second-pass values.

Stage resolutions for an input at stride 16: 1/8, 1/4, 1/2. The mask
head works on the blended half-resolution map and a final bilinear
doubling brings logits to full resolution; per-object logits come from
projecting pixels onto the identity embedding rows, with one shared
learned direction for the background.
"""

from __future__ import annotations

from typing import List, Sequence

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Parameter, Tensor
from memvos.encoder import FramePyramid


class _UpResBlock(nn.Module):
    """Parameter-free doubling followed by a residual refinement."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        self.block = nn.ResidualBlock(in_channels, out_channels, rng)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        return self.block(ad.bilinear_resize(x, 2 * h, 2 * w))


class CompensatoryDecoder(nn.Module):
    def __init__(self, token_dim: int, enc_channels: Sequence[int],
                 dec_channels: Sequence[int], ctx_stem_channels: int,
                 id_dim: int, rng: np.random.Generator):
        if len(dec_channels) != 3:
            raise ValueError("decoder needs three stage widths (strides 8, 4, 2)")
        c2e, c4e, c8e, _ = enc_channels
        c1, c2, c3 = dec_channels

        # upsampling stages shared verbatim by both decode passes
        self.up = [
            nn.Upsample2x(token_dim, c1, rng),
            nn.Upsample2x(c1, c2, rng),
            nn.Upsample2x(c2, c3, rng),
        ]
        self.skip8 = nn.Conv2d(c8e, c1, 1, rng)
        self.skip4 = nn.Conv2d(c4e, c2, 1, rng)

        # stage prompts and the frame-anchored context chain
        self.prompts = [
            nn.SpatialPyramidPooling(c1, c1, rng, dilations=(1, 2)),
            nn.SpatialPyramidPooling(c2, c2, rng, dilations=(1, 2, 4)),
            nn.SpatialPyramidPooling(c3, c3, rng, dilations=(1, 2, 4)),
        ]
        self.ctx_stem = nn.Conv2d(3, ctx_stem_channels, 3, rng, stride=2, padding=1)
        self.ctx_down = [
            nn.ResidualBlock(ctx_stem_channels, c1, rng, stride=2),
            nn.ResidualBlock(c1, c1, rng, stride=2),
        ]
        self.ctx_up = [_UpResBlock(c1, c2, rng), _UpResBlock(c2, c3, rng)]
        # bias-free so an all-zero context adds exactly nothing
        self.ctx_to_tokens = nn.Linear(c3, token_dim, rng, bias=False)

        # per-stage blending gates between the two passes
        self.gates = [
            nn.Conv2d(2 * c1, c1, 1, rng),
            nn.Conv2d(2 * c2, c2, 1, rng),
            nn.Conv2d(2 * c3, c3, 1, rng),
        ]

        self.head_conv = nn.Conv2d(c3, c3, 3, rng, padding=1)
        self.head_proj = nn.Conv2d(c3, id_dim, 1, rng)
        self.background = Parameter(rng.normal(scale=0.5, size=(id_dim,)))
        self.token_dim = int(token_dim)

    # -- base pass -------------------------------------------------------------

    def pre_decode(self, readout_map: Tensor, pyramid: FramePyramid) -> List[Tensor]:
        """Readout map at stride 16 -> base maps at strides 8, 4, 2."""
        d1 = self.up[0](readout_map) + self.skip8(pyramid.stride8)
        d2 = self.up[1](d1) + self.skip4(pyramid.stride4)
        d3 = self.up[2](d2)
        return [d1, d2, d3]

    # -- context pass ------------------------------------------------------------

    def context_chain(self, frame: Tensor, base_maps: Sequence[Tensor]) -> List[Tensor]:
        """Frame plus base-pass prompts -> context states at strides 8, 4, 2."""
        g = [self.prompts[i](base_maps[i]) for i in range(3)]
        f0 = ad.gelu(self.ctx_stem(frame))
        f1 = g[0] + self.ctx_down[1](self.ctx_down[0](f0))
        f2 = g[1] + self.ctx_up[0](f1)
        f3 = g[2] + self.ctx_up[1](f2)
        return [f1, f2, f3]

    def context_tokens(self, context_final: Tensor) -> Tensor:
        """Final context state -> an additive correction in token space.

        The half-resolution state is averaged down to the matching grid
        and linearly projected without bias, so a zero context yields a
        zero correction and the readout passes through unchanged.
        """
        pooled = nn.average_pool_map(context_final, 8)
        return self.ctx_to_tokens(nn.map_to_tokens(pooled))

    # -- second pass and blending ---------------------------------------------------

    def post_decode(self, compensated_map: Tensor, base_maps: Sequence[Tensor],
                    context: Sequence[Tensor]) -> Tensor:
        """Run the shared stages again with context injection and blend.

        Each stage output is gated per pixel and channel between the
        second pass and the base pass, which pins the blend inside the
        interval the two passes span.
        """
        current = compensated_map
        for i in range(3):
            second = self.up[i](current) + context[i]
            gate = ad.sigmoid(self.gates[i](ad.concat([base_maps[i], second], axis=0)))
            current = gate * second + (1.0 - gate) * base_maps[i]
        return current

    # -- mask head ----------------------------------------------------------------------

    def mask_logits(self, final_map: Tensor, identity_rows: Tensor,
                    num_objects: int) -> Tensor:
        """Half-resolution map -> per-pixel class logits [M+1, H, W].

        Channel 0 is background; channel k projects pixels onto the
        k-th identity embedding row. Training losses consume the raw
        logits so confidently wrong pixels keep a usable gradient.
        """
        c, h, w = final_map.shape
        feat = ad.gelu(self.head_conv(final_map))
        feat = self.head_proj(ad.bilinear_resize(feat, 2 * h, 2 * w))
        tokens = nn.map_to_tokens(feat)                                   # [HW, id_dim]
        rows = ad.narrow(identity_rows, 0, 0, num_objects)                # [M, id_dim]
        obj_logits = ad.matmul(tokens, ad.transpose(rows, (1, 0)))        # [HW, M]
        id_dim = self.background.shape[0]
        bg_logits = ad.matmul(tokens, self.background.reshape(id_dim, 1))  # [HW, 1]
        logits = ad.concat([bg_logits, obj_logits], axis=1)
        return nn.tokens_to_map(logits, 2 * h, 2 * w)

    def mask_probabilities(self, final_map: Tensor, identity_rows: Tensor,
                           num_objects: int) -> Tensor:
        """mask_logits followed by a softmax over the object axis."""
        return ad.softmax(self.mask_logits(final_map, identity_rows, num_objects),
                          axis=0)
