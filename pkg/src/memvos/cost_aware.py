"""Short-term matching conditioned on a global matching-cost field.

The matcher compares the current frame's query tokens against the
previous frame's key tokens with exact all-pairs dot products. Each
query position therefore owns a full similarity map over the previous
frame. Those per-position maps are cut into patches, linearly embedded
with a learned per-patch position code, and summarized by a small set
of learned latent tokens (cross attention into the patches, then one
self-attention block over the latents). The collapsed latent summary
becomes a per-position descriptor that drives a reduced-resolution
attention read from the previous frame's value tokens.

Keeping the whole similarity field, instead of only its row-max, lets
the read distinguish "one sharp match" from "many weak matches" and
suppress look-alike distractors near the object.
"""

from __future__ import annotations

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Parameter, Tensor


def matching_costs(query_tokens: Tensor, prev_key_tokens: Tensor) -> Tensor:
    """[N1, C] x [N2, C] -> [N1, N2] raw dot-product similarities."""
    return ad.pairwise_dot(query_tokens, prev_key_tokens)


class CostPatchEmbedding(nn.Module):
    """Cut each per-position similarity map into embedded patches.

    Input is the [N1, N2] cost field with N2 = grid_h * grid_w. Every
    row is viewed as a grid_h x grid_w map, split into non-overlapping
    patch x patch tiles, and each tile is mapped to ``dim`` channels;
    a learned code per tile position is added.
    """

    def __init__(self, grid_h: int, grid_w: int, patch: int, dim: int,
                 rng: np.random.Generator):
        if grid_h % patch or grid_w % patch:
            raise ValueError(f"grid {grid_h}x{grid_w} not divisible by patch extent {patch}")
        self.grid_h, self.grid_w, self.patch = int(grid_h), int(grid_w), int(patch)
        self.num_patches = (grid_h // patch) * (grid_w // patch)
        self.embed = nn.Linear(patch * patch, dim, rng)
        self.position = Parameter(rng.normal(scale=0.02, size=(self.num_patches, dim)))

    def __call__(self, costs: Tensor) -> Tensor:
        n1, n2 = costs.shape
        gh, gw, p = self.grid_h, self.grid_w, self.patch
        if n2 != gh * gw:
            raise ad.ShapeError(f"cost rows have {n2} cells, expected {gh * gw}")
        tiles = costs.reshape(n1, gh // p, p, gw // p, p)
        tiles = ad.transpose(tiles, (0, 1, 3, 2, 4)).reshape(n1, self.num_patches, p * p)
        return self.embed(tiles) + self.position


class CostAwareMatcher(nn.Module):
    """Previous-frame value read steered by the full matching-cost field."""

    def __init__(self, dim: int, grid_h: int, grid_w: int, rng: np.random.Generator,
                 patch: int = 2, latent_tokens: int = 16, latent_dim: int = 64,
                 num_heads: int = 4, readout_reduction: int = 2):
        self.grid = (int(grid_h), int(grid_w))
        self.patches = CostPatchEmbedding(grid_h, grid_w, patch, latent_dim, rng)
        self.latents = Parameter(rng.normal(scale=0.5, size=(latent_tokens, latent_dim)))
        self.gather = nn.MultiHeadAttention(latent_dim, num_heads, rng)
        self.refine = nn.SelfAttentionBlock(latent_dim, num_heads, rng, ffn_mult=2)
        self.collapse = nn.Linear(latent_dim, dim, rng)
        self.readout_reduction = int(readout_reduction)
        self.out = nn.Linear(dim, dim, rng)
        self.latent_tokens = int(latent_tokens)
        self.latent_dim = int(latent_dim)

    def cost_descriptors(self, costs: Tensor) -> Tensor:
        """[N1, N2] costs -> [N1, C] per-position summaries of the field."""
        tokens = self.patches(costs)                      # [N1, S, Cl]
        n1 = tokens.shape[0]
        queries = ad.expand(self.latents.reshape(1, self.latent_tokens, self.latent_dim),
                            (n1, self.latent_tokens, self.latent_dim))
        latents = self.gather(queries, tokens, tokens)    # [N1, Nl, Cl]
        latents = self.refine(latents)
        return self.collapse(latents.mean(axis=1))        # [N1, C]

    def __call__(self, query_tokens: Tensor, prev_key_tokens: Tensor,
                 prev_value_tokens: Tensor) -> Tensor:
        """[N, C] query tokens -> [N, C] short-term readout."""
        costs = matching_costs(query_tokens, prev_key_tokens)
        desc = self.cost_descriptors(costs)
        gh, gw = self.grid
        read = nn.ss_attention(desc, desc, prev_value_tokens, gh, gw,
                               reduction_ratio=self.readout_reduction)
        return self.out(desc + read)
