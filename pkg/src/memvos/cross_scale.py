"""Long-term matching across several spatial granularities.

Stored memory keys and values are re-gridded per memory frame by
learned strided convolutions (one pair per reduction rate), then each
granularity runs its own multi-head cross attention from the current
frame's query tokens into the reduced memory. The per-rate readouts
are concatenated channel-wise and fused by a linear map followed by a
token-wise normalization.

Coarser rates see the same memory with fewer, larger cells, which keeps
the match stable when an object's on-screen size drifts between the
memory frame and the current frame.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Tensor
from memvos.memory import MemoryEntry

# kernel extent per reduction rate: rate 1 keeps the grid and uses a
# pointwise map, higher rates widen the window so cells overlap
_KERNELS = {1: (1, 0), 2: (3, 1), 4: (5, 2)}


class CrossScaleMatcher(nn.Module):
    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator,
                 rates: Sequence[int] = (1, 2, 4)):
        for r in rates:
            if r not in _KERNELS:
                raise ValueError(f"unsupported reduction rate {r}; known: {sorted(_KERNELS)}")
        self.rates = tuple(int(r) for r in rates)
        self.key_reducers = [
            nn.Conv2d(dim, dim, _KERNELS[r][0], rng, stride=r, padding=_KERNELS[r][1])
            for r in self.rates
        ]
        self.value_reducers = [
            nn.Conv2d(dim, dim, _KERNELS[r][0], rng, stride=r, padding=_KERNELS[r][1])
            for r in self.rates
        ]
        self.attend = [nn.MultiHeadAttention(dim, num_heads, rng) for _ in self.rates]
        self.fuse = nn.Linear(dim * len(self.rates), dim, rng)
        self.norm = nn.LayerNorm(dim)
        self.dim = int(dim)

    def set_identity_reduction(self, rate_index: int) -> None:
        """Make a rate-1 reducer pair pass keys and values through unchanged."""
        if self.rates[rate_index] != 1:
            raise ValueError("only a rate-1 reducer can be the identity")
        for conv in (self.key_reducers[rate_index], self.value_reducers[rate_index]):
            dt = conv.weight.data.dtype
            conv.weight.data = np.eye(self.dim, dtype=dt).reshape(self.dim, self.dim, 1, 1)
            conv.bias.data = np.zeros(self.dim, dtype=dt)

    def _reduce_entries(self, entries: Sequence[MemoryEntry], grid: tuple[int, int],
                        rate_index: int) -> tuple[Tensor, Tensor]:
        """Re-grid every memory frame separately, then stack the tokens."""
        h, w = grid
        kconv = self.key_reducers[rate_index]
        vconv = self.value_reducers[rate_index]
        keys, values = [], []
        for e in entries:
            kmap = nn.tokens_to_map(e.key_tokens, h, w)
            vmap = nn.tokens_to_map(e.value_tokens, h, w)
            keys.append(nn.map_to_tokens(kconv(kmap)))
            values.append(nn.map_to_tokens(vconv(vmap)))
        return ad.concat(keys, axis=0), ad.concat(values, axis=0)

    def scale_branch(self, query_tokens: Tensor, entries: Sequence[MemoryEntry],
                     grid: tuple[int, int], rate_index: int) -> Tensor:
        """One granularity's cross-attention readout, before fusion."""
        keys, values = self._reduce_entries(entries, grid, rate_index)
        return self.attend[rate_index](query_tokens, keys, values)

    def __call__(self, query_tokens: Tensor, entries: Sequence[MemoryEntry],
                 grid: tuple[int, int]) -> Tensor:
        """[N, C] query tokens -> [N, C] long-term readout."""
        if not entries:
            raise RuntimeError("cross-scale matching needs at least one memory entry")
        branches = [
            self.scale_branch(query_tokens, entries, grid, i)
            for i in range(len(self.rates))
        ]
        return self.norm(self.fuse(ad.concat(branches, axis=1)))
