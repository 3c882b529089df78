"""Feature memory: identity-coded mask features and the two-horizon bank.

The bank keeps two kinds of state while a clip is processed:

- a long-term list of (key, value) token entries, committed on frame 0
  and every ``update_frequency``-th frame after it, never evicted
  within a clip;
- a short-term slot holding only the previous frame's key and value,
  replaced on every step.

Masks enter the feature space through per-object identity embeddings:
each object id selects a learned row, the resulting embedding image is
reduced by one large strided convolution to the matching stride, and a
fusion block mixes it with the frame's key map to form the value.
Because object identity lives in the channels, one value map carries
every object in the scene at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Parameter, Tensor


class IdentityEncoder(nn.Module):
    """Object-id mask to a stride-16 feature map.

    The embedding table has ``max_objects + 1`` rows; row 0 is the
    background. The reducing convolution covers a 17x17 window with
    stride 16, so every output cell summarizes one matching-token cell
    of the mask with a one-pixel fringe.
    """

    def __init__(self, max_objects: int, id_dim: int, out_channels: int,
                 rng: np.random.Generator):
        self.embedding = Parameter(rng.normal(scale=1.0, size=(max_objects + 1, id_dim)))
        self.reduce = nn.Conv2d(id_dim, out_channels, 17, rng, stride=16, padding=8)
        self.max_objects = int(max_objects)
        self.id_dim = int(id_dim)

    def embed_mask(self, mask: np.ndarray) -> Tensor:
        """[H, W] integer ids -> [id_dim, H, W] embedding image."""
        mask = np.asarray(mask)
        if mask.min() < 0 or mask.max() > self.max_objects:
            raise ValueError(
                f"mask ids span [{mask.min()}, {mask.max()}], table holds 0..{self.max_objects}")
        h, w = mask.shape
        onehot = np.zeros((h * w, self.max_objects + 1), dtype=self.embedding.data.dtype)
        onehot[np.arange(h * w), mask.reshape(-1)] = 1.0
        tokens = ad.matmul(Tensor(onehot), self.embedding)
        return nn.tokens_to_map(tokens, h, w)

    def __call__(self, mask: np.ndarray) -> Tensor:
        """[H, W] ids -> [out_channels, H/16, W/16] mask feature."""
        return self.reduce(self.embed_mask(mask))

    def object_rows(self) -> Tensor:
        """Embedding rows 1..max_objects, used by the mask head readout."""
        return ad.narrow(self.embedding, 0, 1, self.max_objects)


class ValueFusion(nn.Module):
    """Mix a key map with a mask feature map into a memory value map."""

    def __init__(self, key_channels: int, mask_channels: int, out_channels: int,
                 rng: np.random.Generator):
        self.mix = nn.Conv2d(key_channels + mask_channels, out_channels, 1, rng)
        self.refine = nn.ResidualBlock(out_channels, out_channels, rng)

    def __call__(self, key_map: Tensor, mask_feature: Tensor) -> Tensor:
        return self.refine(ad.gelu(self.mix(ad.concat([key_map, mask_feature], axis=0))))


@dataclass
class MemoryEntry:
    frame_index: int
    key_tokens: Tensor    # [N, C]
    value_tokens: Tensor  # [N, C]


class MemoryBank:
    """Two-horizon memory for one clip."""

    def __init__(self, update_frequency: int = 5):
        if update_frequency < 1:
            raise ValueError("update frequency must be positive")
        self.update_frequency = int(update_frequency)
        self.entries: List[MemoryEntry] = []
        self.previous: Optional[MemoryEntry] = None

    def __len__(self) -> int:
        return len(self.entries)

    def should_commit_long_term(self, frame_index: int) -> bool:
        return frame_index % self.update_frequency == 0

    def commit(self, frame_index: int, key_tokens: Tensor, value_tokens: Tensor) -> None:
        """Record a processed frame: always to short-term, periodically to long-term."""
        entry = MemoryEntry(frame_index, key_tokens, value_tokens)
        if self.should_commit_long_term(frame_index):
            self.entries.append(entry)
        self.previous = entry

    def detach_all(self) -> None:
        """Cut stored tensors from the live graph (truncated backprop)."""
        self.entries = [
            MemoryEntry(e.frame_index, e.key_tokens.detach(), e.value_tokens.detach())
            for e in self.entries
        ]
        if self.previous is not None:
            self.previous = MemoryEntry(self.previous.frame_index,
                                        self.previous.key_tokens.detach(),
                                        self.previous.value_tokens.detach())

    def stacked_long_term(self) -> tuple[Tensor, Tensor]:
        """All long-term keys and values as two [N_total, C] stacks."""
        if not self.entries:
            raise RuntimeError("long-term memory is empty")
        keys = ad.concat([e.key_tokens for e in self.entries], axis=0)
        values = ad.concat([e.value_tokens for e in self.entries], axis=0)
        return keys, values
