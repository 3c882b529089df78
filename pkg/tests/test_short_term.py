"""Cost-aware short-term matcher tests."""

import numpy as np
import pytest

from memvos import autodiff as ad
from memvos.autodiff import Tensor
from memvos.cost_aware import CostAwareMatcher, CostPatchEmbedding, matching_costs


@pytest.fixture
def rng():
    return np.random.default_rng(13)


class TestMatchingCosts:
    def test_entries_are_unscaled_dots(self, rng):
        a = rng.normal(size=(6, 5))
        b = rng.normal(size=(9, 5))
        costs = matching_costs(Tensor(a), Tensor(b)).data
        assert costs.shape == (6, 9)
        # raw dot products, no magnitude normalization of any kind
        for i in range(6):
            for j in range(9):
                assert costs[i, j] == pytest.approx(np.dot(a[i], b[j]), abs=1e-12)

    def test_self_costs_bitwise_symmetric(self, rng):
        x = rng.normal(size=(16, 8))
        c = matching_costs(Tensor(x), Tensor(x)).data
        assert np.array_equal(c, c.T)

    def test_gradients(self, rng):
        a0 = rng.normal(size=(4, 5))
        b0 = rng.normal(size=(6, 5))

        def fa(t):
            out = matching_costs(t, Tensor(b0))
            return (out * out).sum()

        def fb(t):
            out = matching_costs(Tensor(a0), t)
            return (out * out).sum()

        assert ad.grad_check(fa, Tensor(a0)) <= 1e-6
        assert ad.grad_check(fb, Tensor(b0)) <= 1e-6

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ad.ShapeError):
            matching_costs(Tensor(rng.normal(size=(4, 5))),
                           Tensor(rng.normal(size=(4, 6))))


class TestPatchEmbedding:
    def test_token_layout(self, rng):
        pe = CostPatchEmbedding(4, 4, 2, dim=6, rng=rng)
        costs = Tensor(rng.normal(size=(5, 16)))
        out = pe(costs)
        assert out.shape == (5, 4, 6)  # 4 tiles of 2x2 in a 4x4 grid

    def test_patch_values_routed_correctly(self, rng):
        # mark one cost cell; only the tile containing it may react
        pe = CostPatchEmbedding(4, 4, 2, dim=3, rng=rng)
        base = np.zeros((1, 16))
        bumped = base.copy()
        bumped[0, 0] = 1.0  # cell (0,0) lives in tile 0
        a = pe(Tensor(base)).data
        b = pe(Tensor(bumped)).data
        delta = np.abs(a - b).sum(axis=2)[0]
        assert delta[0] > 0
        assert np.allclose(delta[1:], 0.0)

    def test_indivisible_patch_rejected(self, rng):
        with pytest.raises(ValueError):
            CostPatchEmbedding(5, 5, 2, dim=4, rng=rng)

    def test_position_codes_distinguish_tiles(self, rng):
        pe = CostPatchEmbedding(4, 4, 2, dim=4, rng=rng)
        # identical tile content everywhere: outputs differ only by position code
        costs = Tensor(np.tile(rng.normal(size=(1, 4)), (1, 4)))
        reread = pe(costs).data[0]
        assert not np.allclose(reread[0], reread[1])


class TestCostAwareMatcher:
    def make(self, rng, dim=8):
        return CostAwareMatcher(dim, 4, 4, rng, patch=2, latent_tokens=6,
                                latent_dim=8, num_heads=2, readout_reduction=2)

    def test_output_shape(self, rng):
        m = self.make(rng)
        q = Tensor(rng.normal(size=(16, 8)))
        out = m(q, Tensor(rng.normal(size=(16, 8))), Tensor(rng.normal(size=(16, 8))))
        assert out.shape == (16, 8)

    def test_descriptors_depend_on_costs(self, rng):
        m = self.make(rng)
        a = m.cost_descriptors(Tensor(rng.normal(size=(16, 16)))).data
        b = m.cost_descriptors(Tensor(rng.normal(size=(16, 16)))).data
        assert not np.allclose(a, b)

    def test_previous_values_reach_output(self, rng):
        m = self.make(rng)
        q = Tensor(rng.normal(size=(16, 8)))
        k = Tensor(rng.normal(size=(16, 8)))
        a = m(q, k, Tensor(rng.normal(size=(16, 8)))).data
        b = m(q, k, Tensor(rng.normal(size=(16, 8)))).data
        assert not np.allclose(a, b)

    def test_gradient_through_matcher(self, rng):
        m = self.make(rng)
        k0 = rng.normal(size=(16, 8))
        v0 = rng.normal(size=(16, 8))

        def f(t):
            out = m(t, Tensor(k0), Tensor(v0))
            return (out * out).sum()

        assert ad.grad_check(f, Tensor(rng.normal(size=(16, 8))), max_coords=40,
                             rng=np.random.default_rng(3)) <= 1e-6
