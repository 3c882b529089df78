"""Clip-level propagation engine.

Given a clip and the reference mask for its first frame, the engine
walks the frames in order. Every frame is encoded to matching tokens;
the long-term matcher reads the growing multi-frame memory, the
short-term matcher reads the previous frame under the guidance of a
global matching-cost field, and the two readouts are added onto the
query tokens in a fixed order:

    fused = (long_term + short_term) + query

A disabled matcher simply drops out of the sum, so with both disabled
the fused readout is the query tokens themselves, bit for bit. The
decoder turns the fused tokens into per-object class scores; the
hardened (argmax) masks drive the memory commits for later frames.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, fields
from typing import List, Optional

import numpy as np

from memvos import autodiff as ad
from memvos import nn
from memvos.autodiff import Tensor
from memvos.cost_aware import CostAwareMatcher
from memvos.cross_scale import CrossScaleMatcher
from memvos.decoder import CompensatoryDecoder
from memvos.encoder import FrameEncoder
from memvos.losses import segmentation_loss
from memvos.memory import IdentityEncoder, MemoryBank, ValueFusion


class ConfigError(ValueError):
    """A configuration field is missing, mistyped, or out of range."""


@dataclass(frozen=True)
class EngineConfig:
    """Architecture and propagation settings.

    The token grid is ``frame_size / 16`` on a side; several fields
    must divide it cleanly, which :meth:`validate` enforces with
    field-level messages.
    """

    frame_size: int = 64
    enc_channels: tuple = (16, 32, 64, 64)
    match_dim: int = 64
    id_dim: int = 16
    max_objects: int = 3
    num_heads: int = 4
    scale_rates: tuple = (1, 2, 4)
    patch_size: int = 2
    latent_tokens: int = 16
    latent_dim: int = 64
    readout_reduction: int = 2
    dec_channels: tuple = (32, 24, 16)
    ctx_stem_channels: int = 16
    memory_update_frequency: int = 5
    detach_period: int = 4
    use_long_term: bool = True
    use_short_term: bool = True
    use_compensatory: bool = True
    dtype: str = "float32"  # training precision; checks build float64 engines

    @property
    def token_grid(self) -> int:
        return self.frame_size // 16

    def validate(self) -> "EngineConfig":
        def fail(name, why):
            raise ConfigError(f"{name}: {why}")

        if self.frame_size < 32 or self.frame_size % 16:
            fail("frame_size", f"{self.frame_size} must be a multiple of 16, at least 32")
        grid = self.token_grid
        if len(self.enc_channels) != 4 or any(c < 1 for c in self.enc_channels):
            fail("enc_channels", f"{self.enc_channels} must be four positive widths")
        if len(self.dec_channels) != 3 or any(c < 1 for c in self.dec_channels):
            fail("dec_channels", f"{self.dec_channels} must be three positive widths")
        if self.match_dim != self.enc_channels[-1]:
            fail("match_dim", f"{self.match_dim} must equal the last encoder width "
                 f"{self.enc_channels[-1]}")
        if self.match_dim % self.num_heads:
            fail("num_heads", f"{self.num_heads} must divide match_dim {self.match_dim}")
        if self.latent_dim % self.num_heads:
            fail("num_heads", f"{self.num_heads} must divide latent_dim {self.latent_dim}")
        if self.max_objects < 1:
            fail("max_objects", "need at least one foreground slot")
        if self.id_dim < 1:
            fail("id_dim", "identity width must be positive")
        if not self.scale_rates or sorted(set(self.scale_rates)) != sorted(self.scale_rates):
            fail("scale_rates", f"{self.scale_rates} must be non-empty and free of repeats")
        for r in self.scale_rates:
            if r not in (1, 2, 4):
                fail("scale_rates", f"rate {r} unsupported (choose from 1, 2, 4)")
            if r > 1 and grid % r:
                fail("scale_rates", f"rate {r} does not divide the token grid {grid}")
        if self.patch_size < 1 or grid % self.patch_size:
            fail("patch_size", f"{self.patch_size} does not divide the token grid {grid}")
        if self.readout_reduction < 1 or grid % self.readout_reduction:
            fail("readout_reduction",
                 f"{self.readout_reduction} does not divide the token grid {grid}")
        if self.latent_tokens < 1 or self.latent_dim < 1:
            fail("latent_tokens", "latent token count and width must be positive")
        if self.memory_update_frequency < 1:
            fail("memory_update_frequency", "must be at least 1")
        if self.detach_period < 1:
            fail("detach_period", "must be at least 1")
        if self.ctx_stem_channels < 1:
            fail("ctx_stem_channels", "must be positive")
        if self.dtype not in ("float64", "float32"):
            fail("dtype", f"{self.dtype!r} is not one of float64/float32")
        return self

    @staticmethod
    def from_dict(raw: dict) -> "EngineConfig":
        known = {f.name for f in fields(EngineConfig)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown engine field")
        kwargs = dict(raw)
        for key in ("enc_channels", "dec_channels", "scale_rates"):
            if key in kwargs:
                if not isinstance(kwargs[key], (list, tuple)):
                    raise ConfigError(f"{key}: expected a list of integers")
                kwargs[key] = tuple(int(v) for v in kwargs[key])
        try:
            cfg = EngineConfig(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()


class SegmentationModel(nn.Module):
    """All trainable parts, built deterministically from one seed."""

    def __init__(self, config: EngineConfig, seed: int = 0):
        config.validate()
        rng = np.random.default_rng(seed)
        c = config.match_dim
        grid = config.token_grid
        self.encoder = FrameEncoder(3, config.enc_channels, rng)
        self.key_proj = nn.Linear(c, c, rng)
        self.id_encoder = IdentityEncoder(config.max_objects, config.id_dim, c, rng)
        self.value_fusion = ValueFusion(c, c, c, rng)
        self.long_term = CrossScaleMatcher(c, config.num_heads, rng, rates=config.scale_rates)
        self.short_term = CostAwareMatcher(
            c, grid, grid, rng, patch=config.patch_size,
            latent_tokens=config.latent_tokens, latent_dim=config.latent_dim,
            num_heads=config.num_heads, readout_reduction=config.readout_reduction)
        self.decoder = CompensatoryDecoder(
            c, config.enc_channels, config.dec_channels,
            config.ctx_stem_channels, config.id_dim, rng)
        self.config = config

    def cast_parameters(self, dtype) -> None:
        for p in self.parameters():
            p.data = np.ascontiguousarray(p.data, dtype=dtype)


@dataclass
class ReadoutBundle:
    """Per-frame matching intermediates, kept for inspection and tests."""

    query: Tensor
    long_term: Optional[Tensor]
    short_term: Optional[Tensor]
    fused: Tensor
    compensated: Tensor


@dataclass
class ClipResult:
    masks: np.ndarray                       # [T, H, W] object ids, frame 0 given
    frame_losses: List[Tensor] = field(default_factory=list)
    bundles: List[ReadoutBundle] = field(default_factory=list)
    memory_size: int = 0


class VosEngine:
    """Stateless-per-call wrapper running clips through one model."""

    def __init__(self, model: SegmentationModel):
        self.model = model
        self.config = model.config
        self.np_dtype = np.float64 if self.config.dtype == "float64" else np.float32

    def _commit(self, bank: MemoryBank, frame_index: int, query_tokens: Tensor,
                mask: np.ndarray, grid: int) -> None:
        m = self.model
        key_tokens = m.key_proj(query_tokens)
        key_map = nn.tokens_to_map(key_tokens, grid, grid)
        mask_feature = m.id_encoder(mask)
        value_map = m.value_fusion(key_map, mask_feature)
        bank.commit(frame_index, key_tokens, nn.map_to_tokens(value_map))

    def _match(self, query_tokens: Tensor, bank: MemoryBank, grid: int) -> ReadoutBundle:
        m, cfg = self.model, self.config
        long_term = None
        short_term = None
        if cfg.use_long_term:
            long_term = m.long_term(query_tokens, bank.entries, (grid, grid))
        if cfg.use_short_term:
            prev = bank.previous
            short_term = m.short_term(m.key_proj(query_tokens),
                                      prev.key_tokens, prev.value_tokens)
        # fixed fusion order: (long + short) + query
        if long_term is not None and short_term is not None:
            fused = (long_term + short_term) + query_tokens
        elif long_term is not None:
            fused = long_term + query_tokens
        elif short_term is not None:
            fused = short_term + query_tokens
        else:
            fused = query_tokens
        return ReadoutBundle(query=query_tokens, long_term=long_term,
                             short_term=short_term, fused=fused, compensated=fused)

    def _decode(self, bundle: ReadoutBundle, frame: Tensor, pyramid, num_objects: int,
                grid: int) -> Tensor:
        m, cfg = self.model, self.config
        base_map = nn.tokens_to_map(bundle.fused, grid, grid)
        base_maps = m.decoder.pre_decode(base_map, pyramid)
        if cfg.use_compensatory:
            context = m.decoder.context_chain(frame, base_maps)
            bundle.compensated = bundle.fused + m.decoder.context_tokens(context[-1])
            comp_map = nn.tokens_to_map(bundle.compensated, grid, grid)
            final_map = m.decoder.post_decode(comp_map, base_maps, context)
        else:
            final_map = base_maps[-1]
        return m.decoder.mask_logits(final_map, m.id_encoder.object_rows(),
                                     num_objects)

    def run_clip(self, frames: np.ndarray, first_mask: np.ndarray, num_objects: int,
                 teacher_masks: Optional[np.ndarray] = None, train: bool = False,
                 keep_bundles: bool = False) -> ClipResult:
        """Propagate the first-frame mask through a clip.

        frames: [T, 3, H, W]; first_mask: [H, W] integer ids. With
        ``train`` set, per-frame losses against ``teacher_masks`` are
        collected and the memory graph is cut every ``detach_period``
        frames; committed masks are always the engine's own hardened
        predictions, not the teacher's.
        """
        cfg = self.config
        T, _, H, W = frames.shape
        if (H, W) != (cfg.frame_size, cfg.frame_size):
            raise ValueError(f"frames are {H}x{W}, engine is built for "
                             f"{cfg.frame_size}x{cfg.frame_size}")
        if num_objects < 1 or num_objects > cfg.max_objects:
            raise ValueError(f"num_objects {num_objects} outside 1..{cfg.max_objects}")
        if train and teacher_masks is None:
            raise ValueError("training requires teacher masks")
        grid = cfg.token_grid

        bank = MemoryBank(cfg.memory_update_frequency)
        result = ClipResult(masks=np.zeros((T, H, W), dtype=np.uint8))
        result.masks[0] = first_mask

        guard = contextlib.nullcontext() if train else ad.no_grad()
        with guard:
            for t in range(T):
                frame = Tensor(np.ascontiguousarray(frames[t], dtype=self.np_dtype))
                pyramid = self.model.encoder(frame)
                query_tokens = pyramid.query_tokens
                if t == 0:
                    self._commit(bank, 0, query_tokens, first_mask, grid)
                else:
                    bundle = self._match(query_tokens, bank, grid)
                    logits = self._decode(bundle, frame, pyramid, num_objects, grid)
                    hard = np.argmax(logits.data, axis=0).astype(np.uint8)
                    result.masks[t] = hard
                    if train:
                        result.frame_losses.append(
                            segmentation_loss(logits, teacher_masks[t]))
                    if keep_bundles:
                        result.bundles.append(bundle)
                    self._commit(bank, t, query_tokens, hard, grid)
                if train and (t + 1) % cfg.detach_period == 0:
                    bank.detach_all()
        result.memory_size = len(bank)
        return result


def build_engine(config: EngineConfig, seed: int = 0) -> VosEngine:
    model = SegmentationModel(config, seed=seed)
    if config.dtype == "float32":
        model.cast_parameters(np.float32)
    return VosEngine(model)
