"""Engine-level tests: config validation, clip propagation, exact
reduction behavior when mechanisms are switched off."""

import numpy as np
import pytest

from memvos import synthetic
from memvos.engine import ConfigError, EngineConfig, build_engine


def tiny_config(**overrides):
    """Small widths keep full-clip runs around a tenth of a second."""
    base = dict(frame_size=64, enc_channels=(4, 6, 8, 8), match_dim=8,
                id_dim=4, num_heads=2, latent_tokens=4, latent_dim=8,
                dec_channels=(8, 6, 4), ctx_stem_channels=4, dtype="float64")
    base.update(overrides)
    return EngineConfig(**base).validate()


class TestConfigValidation:
    def test_default_config_is_valid(self):
        EngineConfig().validate()

    @pytest.mark.parametrize("field,value", [
        ("frame_size", 60),
        ("frame_size", 16),
        ("match_dim", 7),
        ("num_heads", 5),
        ("max_objects", 0),
        ("id_dim", 0),
        ("scale_rates", (1, 2, 2)),
        ("scale_rates", (3,)),
        ("scale_rates", ()),
        ("patch_size", 3),
        ("readout_reduction", 3),
        ("memory_update_frequency", 0),
        ("detach_period", 0),
        ("dtype", "float16"),
        ("enc_channels", (16, 32, 64)),
        ("dec_channels", (32, 24)),
    ])
    def test_bad_field_rejected_with_field_name(self, field, value):
        with pytest.raises(ConfigError) as err:
            EngineConfig(**{field: value}).validate()
        assert str(err.value).split(":")[0] in (field, "match_dim", "num_heads")

    def test_from_dict_rejects_unknown_key(self):
        with pytest.raises(ConfigError, match="wibble"):
            EngineConfig.from_dict({"wibble": 3})

    def test_from_dict_coerces_lists(self):
        cfg = EngineConfig.from_dict({"scale_rates": [1, 2]})
        assert cfg.scale_rates == (1, 2)

    def test_token_grid(self):
        assert EngineConfig(frame_size=64).token_grid == 4
        assert EngineConfig(frame_size=96).token_grid == 6


@pytest.fixture(scope="module")
def engine():
    return build_engine(tiny_config(), seed=3)


@pytest.fixture(scope="module")
def clip():
    return synthetic.training_clip(11, num_frames=8, height=64, width=64)


@pytest.fixture(scope="module")
def short_clip():
    return synthetic.training_clip(13, num_frames=4, height=64, width=64)


class TestRunClip:
    def test_masks_cover_all_frames(self, engine, clip):
        result = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects)
        assert result.masks.shape == clip.masks.shape
        assert np.array_equal(result.masks[0], clip.masks[0])
        assert result.masks.max() <= clip.num_objects

    def test_memory_count_follows_update_frequency(self, engine):
        # floor((T-1)/5)+1 entries after a T-frame clip
        for T in (1, 2, 5, 6, 11, 16):
            clip = synthetic.training_clip(12, num_frames=T, height=64, width=64)
            result = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects)
            assert result.memory_size == (T - 1) // 5 + 1, f"T={T}"

    def test_training_mode_collects_losses(self, engine, clip):
        result = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects,
                                 teacher_masks=clip.masks, train=True)
        assert len(result.frame_losses) == len(clip.frames) - 1
        for fl in result.frame_losses:
            assert np.isfinite(fl.item())

    def test_training_without_teacher_rejected(self, engine, clip):
        with pytest.raises(ValueError, match="teacher"):
            engine.run_clip(clip.frames, clip.masks[0], clip.num_objects, train=True)

    def test_wrong_frame_size_rejected(self, engine):
        frames = np.zeros((2, 3, 32, 32))
        with pytest.raises(ValueError, match="32x32"):
            engine.run_clip(frames, np.zeros((32, 32), dtype=np.uint8), 1)

    def test_object_count_bounds(self, engine, clip):
        with pytest.raises(ValueError, match="num_objects"):
            engine.run_clip(clip.frames, clip.masks[0], 0)
        with pytest.raises(ValueError, match="num_objects"):
            engine.run_clip(clip.frames, clip.masks[0], 99)

    def test_repeat_run_is_bit_identical(self, engine, clip):
        a = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects)
        b = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects)
        assert np.array_equal(a.masks, b.masks)


class TestMechanismReductions:
    """Disabled matchers must vanish from the fused sum exactly."""

    def test_both_matchers_off_fused_is_query(self, short_clip):
        eng = build_engine(tiny_config(use_long_term=False, use_short_term=False),
                           seed=5)
        result = eng.run_clip(short_clip.frames, short_clip.masks[0],
                              short_clip.num_objects, keep_bundles=True)
        for bundle in result.bundles:
            assert bundle.long_term is None and bundle.short_term is None
            assert bundle.fused is bundle.query  # same node, not a copy

    def test_single_matcher_contributions_add(self, short_clip):
        # with one matcher on, fused == matcher readout + query, bit for bit
        eng = build_engine(tiny_config(use_short_term=False), seed=5)
        result = eng.run_clip(short_clip.frames, short_clip.masks[0],
                              short_clip.num_objects, keep_bundles=True)
        for bundle in result.bundles:
            assert bundle.short_term is None
            expect = bundle.long_term.data + bundle.query.data
            assert np.array_equal(bundle.fused.data, expect)

    def test_compensation_off_keeps_fused_readout(self, short_clip):
        eng = build_engine(tiny_config(use_compensatory=False), seed=5)
        result = eng.run_clip(short_clip.frames, short_clip.masks[0],
                              short_clip.num_objects, keep_bundles=True)
        for bundle in result.bundles:
            assert bundle.compensated is bundle.fused

    def test_all_ablation_combinations_produce_valid_masks(self, short_clip):
        # 8-way on/off grid; every variant must emit normalized ids
        for bits in range(8):
            eng = build_engine(tiny_config(
                use_long_term=bool(bits & 1),
                use_short_term=bool(bits & 2),
                use_compensatory=bool(bits & 4)), seed=2)
            result = eng.run_clip(short_clip.frames, short_clip.masks[0],
                                  short_clip.num_objects)
            assert result.masks.max() <= short_clip.num_objects
            assert result.masks.dtype == np.uint8


class TestDeterminism:
    def test_same_seed_same_parameters(self):
        a = build_engine(tiny_config(), seed=9)
        b = build_engine(tiny_config(), seed=9)
        for (na, pa), (nb, pb) in zip(a.model.named_parameters(),
                                      b.model.named_parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_different_parameters(self):
        a = build_engine(tiny_config(), seed=9)
        b = build_engine(tiny_config(), seed=10)
        diff = any(not np.array_equal(pa.data, pb.data)
                   for (_, pa), (_, pb) in zip(a.model.named_parameters(),
                                               b.model.named_parameters()))
        assert diff

    def test_float32_cast_applies_everywhere(self):
        eng = build_engine(tiny_config(dtype="float32"), seed=1)
        assert all(p.data.dtype == np.float32 for p in eng.model.parameters())
