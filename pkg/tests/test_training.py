"""Optimizer, schedule, and train-loop tests."""

import csv

import numpy as np
import pytest

from memvos.autodiff import Parameter
from memvos.engine import EngineConfig, build_engine
from memvos.training import (AdamOptimizer, TrainConfig, TrainRecord,
                             polynomial_lr, train, write_curve, evaluate)
from memvos import synthetic


class TestSchedule:
    def test_endpoints_exact(self):
        """First and last step rates are the configured constants, not
        approximations of them."""
        for total in (1, 7, 1200, 2000):
            assert polynomial_lr(0, total) == 2e-4
            assert polynomial_lr(total, total) == 2e-5

    def test_monotone_decay(self):
        values = [polynomial_lr(s, 100) for s in range(101)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_past_end_clamps(self):
        assert polynomial_lr(150, 100) == 2e-5

    def test_custom_endpoints(self):
        assert polynomial_lr(0, 10, lr_start=1.0, lr_end=0.1) == 1.0
        assert polynomial_lr(10, 10, lr_start=1.0, lr_end=0.1) == 0.1

    def test_power_shapes_curve(self):
        # power < 1 keeps the rate above the linear interpolation
        mid_poly = polynomial_lr(50, 100, lr_start=1.0, lr_end=0.0, power=0.9)
        assert mid_poly > 0.5

    def test_bad_total_rejected(self):
        with pytest.raises(ValueError):
            polynomial_lr(0, 0)


class TestAdam:
    def test_single_step_direction_and_size(self):
        # with bias correction the very first step moves by ~lr per coord
        p = Parameter(np.array([1.0, -2.0]), name="w")
        p.grad = np.array([0.5, -3.0])
        opt = AdamOptimizer([p])
        opt.step(0.01)
        moved = np.array([1.0, -2.0]) - p.data
        assert np.all(np.sign(moved) == np.sign([0.5, -3.0]))
        assert np.allclose(np.abs(moved), 0.01, rtol=1e-4)

    def test_none_grad_skipped(self):
        p = Parameter(np.array([1.0]), name="w")
        opt = AdamOptimizer([p])
        opt.step(0.1)
        assert p.data[0] == 1.0

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(4)
        p = Parameter(rng.normal(size=(3, 2)), name="w")
        opt = AdamOptimizer([p])
        m = np.zeros_like(p.data)
        v = np.zeros_like(p.data)
        ref = p.data.copy()
        for t in range(1, 6):
            g = rng.normal(size=p.data.shape)
            p.grad = g.copy()
            opt.step(1e-3)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9 ** t)
            vhat = v / (1 - 0.999 ** t)
            ref = ref - 1e-3 * mhat / (np.sqrt(vhat) + 1e-8)
            assert np.allclose(p.data, ref, atol=1e-12)

    def test_zero_grad_clears(self):
        p = Parameter(np.array([1.0]), name="w")
        p.grad = np.array([2.0])
        AdamOptimizer([p]).zero_grad()
        assert p.grad is None


def loop_config(steps=6):
    return TrainConfig(steps=steps, seed=0, clip_frames=3, pool_size=4,
                       log_every=2)


def loop_engine():
    cfg = EngineConfig(enc_channels=(4, 6, 8, 8), match_dim=8, id_dim=4,
                       num_heads=2, latent_tokens=4, latent_dim=8,
                       dec_channels=(8, 6, 4), ctx_stem_channels=4).validate()
    return build_engine(cfg, seed=1)


class TestTrainLoop:
    def test_records_and_callback(self):
        eng = loop_engine()
        seen = []
        records = train(eng, loop_config(), on_record=seen.append)
        assert [r.step for r in records] == [2, 4, 6]
        assert seen == records
        assert all(np.isfinite(r.loss) and r.lr > 0 for r in records)

    def test_parameters_change(self):
        eng = loop_engine()
        before = [p.data.copy() for p in eng.model.parameters()]
        train(eng, loop_config(steps=2))
        changed = sum(not np.array_equal(b, p.data)
                      for b, p in zip(before, eng.model.parameters()))
        assert changed > len(before) * 0.9

    def test_pool_cycles_clip_seeds(self):
        # steps beyond pool_size revisit the same clips
        cfg = loop_config(steps=5)
        seeds = [cfg.seed * 100_000 + s % cfg.pool_size for s in range(5)]
        assert seeds[4] == seeds[0]

    def test_validation_messages_name_fields(self):
        with pytest.raises(ValueError, match="steps"):
            TrainConfig(steps=-1).validate()
        TrainConfig(steps=0).validate()  # zero steps writes the init
        with pytest.raises(ValueError, match="clip_frames"):
            TrainConfig(clip_frames=1).validate()
        with pytest.raises(ValueError, match="pool_size"):
            TrainConfig(pool_size=0).validate()
        with pytest.raises(ValueError, match="log_every"):
            TrainConfig(log_every=0).validate()

    def test_write_curve_roundtrip(self, tmp_path):
        path = tmp_path / "curve.csv"
        write_curve(str(path), [TrainRecord(1, 0.5, 2e-4, 1.0),
                                TrainRecord(2, 0.4, 1e-4, 2.0)])
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["step", "loss", "lr", "seconds"]
        assert rows[1][0] == "1" and float(rows[1][1]) == 0.5
        assert len(rows) == 3


class TestEvaluate:
    def test_summary_keys_and_range(self):
        eng = loop_engine()
        clips = [synthetic.training_clip(5, num_frames=3, height=64, width=64)]
        out = evaluate(eng, clips)
        assert set(out) >= {"region", "boundary", "combined", "per_clip"}
        assert 0.0 <= out["region"] <= 1.0
        assert out["per_clip"][0]["category"] == clips[0].category
