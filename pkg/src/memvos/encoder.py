"""Frame encoder: RGB image to a feature pyramid plus matching tokens.

Four stages halve the resolution each, so a [3, H, W] frame becomes
maps at strides 2, 4, 8 and 16. The stride-16 map is flattened into
query tokens for memory matching; strides 4 and 8 feed decoder skips.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Tensor


@dataclass
class FramePyramid:
    """Per-frame encoder outputs, finest first."""

    stride2: Tensor
    stride4: Tensor
    stride8: Tensor
    stride16: Tensor

    @property
    def query_tokens(self) -> Tensor:
        """Stride-16 features as [N, C] matching tokens."""
        return nn.map_to_tokens(self.stride16)

    @property
    def token_grid(self) -> tuple[int, int]:
        return self.stride16.shape[1], self.stride16.shape[2]


class FrameEncoder(nn.Module):
    def __init__(self, in_channels: int, channels: Sequence[int], rng: np.random.Generator):
        if len(channels) != 4:
            raise ValueError("encoder needs four stage widths (strides 2, 4, 8, 16)")
        c2, c4, c8, c16 = channels
        self.stem = nn.Conv2d(in_channels, c2, 3, rng, stride=2, padding=1)
        self.stage2 = nn.ResidualBlock(c2, c4, rng, stride=2)
        self.stage3 = nn.ResidualBlock(c4, c8, rng, stride=2)
        self.stage4 = nn.ResidualBlock(c8, c16, rng, stride=2)

    def __call__(self, frame: Tensor) -> FramePyramid:
        s2 = ad.gelu(self.stem(frame))
        s4 = self.stage2(s2)
        s8 = self.stage3(s4)
        s16 = self.stage4(s8)
        return FramePyramid(stride2=s2, stride4=s4, stride8=s8, stride16=s16)
