"""Loss hand values and gradient behavior."""

import numpy as np
import pytest

from memvos import autodiff as ad
from memvos.autodiff import Tensor
from memvos.losses import cross_entropy, segmentation_loss, soft_region_loss


@pytest.fixture
def rng():
    return np.random.default_rng(8)


class TestCrossEntropy:
    def test_uniform_logits_give_log_classes(self):
        logits = Tensor(np.zeros((3, 2, 2)))
        target = np.zeros((2, 2), dtype=int)
        assert cross_entropy(logits, target).item() == pytest.approx(np.log(3.0))

    def test_correct_confident_prediction_near_zero(self):
        logits = np.full((2, 2, 2), -50.0)
        target = np.array([[0, 1], [1, 0]])
        logits[target, [[0, 0], [1, 1]], [[0, 1], [0, 1]]] = 50.0
        loss = cross_entropy(Tensor(logits), target)
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        """Closed form: d/dlogit mean-CE = (p - y) / num_pixels."""
        logits = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        target = rng.integers(0, 3, size=(4, 4))
        cross_entropy(logits, target).backward()
        p = ad.softmax(Tensor(logits.data), axis=0).data
        onehot = np.zeros((3, 4, 4))
        onehot.reshape(3, -1)[target.reshape(-1), np.arange(16)] = 1.0
        assert np.allclose(logits.grad, (p - onehot) / 16.0, atol=1e-12)

    def test_confidently_wrong_pixel_keeps_gradient(self):
        # the failure mode that motivates computing from logits
        logits = Tensor(np.array([1000.0, -1000.0]).reshape(2, 1, 1),
                        requires_grad=True)
        cross_entropy(logits, np.array([[1]])).backward()
        assert logits.grad.reshape(-1)[1] == pytest.approx(-1.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ShapeError):
            cross_entropy(Tensor(np.zeros((2, 3, 3))), np.zeros((2, 2), dtype=int))

    def test_finite_difference(self, rng):
        logits = Tensor(rng.normal(size=(3, 3, 3)), requires_grad=True)
        target = rng.integers(0, 3, size=(3, 3))
        assert ad.grad_check(lambda t: cross_entropy(t, target), logits) <= 1e-6


class TestSoftRegion:
    def test_perfect_onehot_prediction_is_zero(self):
        target = np.array([[0, 1], [2, 0]])
        probs = np.zeros((3, 2, 2))
        probs.reshape(3, -1)[target.reshape(-1), np.arange(4)] = 1.0
        assert soft_region_loss(Tensor(probs), target).item() == pytest.approx(0.0)

    def test_absent_class_contributes_nothing(self):
        # class 2 in neither prediction nor target: smoothing gives it IoU 1
        target = np.zeros((2, 2), dtype=int)
        probs = np.zeros((3, 2, 2))
        probs[0] = 1.0
        assert soft_region_loss(Tensor(probs), target).item() == pytest.approx(0.0)

    def test_disjoint_prediction_penalized(self):
        target = np.array([[1, 1], [1, 1]])
        probs = np.zeros((2, 2, 2))
        probs[0] = 1.0  # predicts all background
        loss = soft_region_loss(Tensor(probs), target)
        # class 0: inter 0, union 4 -> 1 - 1/5; class 1 the same
        assert loss.item() == pytest.approx(0.8)

    def test_finite_difference(self, rng):
        torso = rng.uniform(0.05, 1.0, size=(3, 3, 3))
        probs = Tensor(torso / torso.sum(axis=0), requires_grad=True)
        target = rng.integers(0, 3, size=(3, 3))
        assert ad.grad_check(lambda t: soft_region_loss(t, target), probs) <= 1e-6


class TestCombined:
    def test_sum_of_parts(self, rng):
        logits = Tensor(rng.normal(size=(3, 4, 4)))
        target = rng.integers(0, 3, size=(4, 4))
        whole = segmentation_loss(logits, target).item()
        ce = cross_entropy(logits, target).item()
        region = soft_region_loss(ad.softmax(logits, axis=0), target).item()
        assert whole == pytest.approx(ce + region, rel=1e-12)

    def test_full_loss_gradient(self, rng):
        logits = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        target = rng.integers(0, 3, size=(4, 4))
        assert ad.grad_check(lambda t: segmentation_loss(t, target), logits) <= 1e-6

    def test_decreases_as_prediction_sharpens(self):
        target = np.array([[1, 0], [0, 1]])
        onehot = np.zeros((2, 2, 2))
        onehot.reshape(2, -1)[target.reshape(-1), np.arange(4)] = 1.0
        weak = segmentation_loss(Tensor(0.5 * (2 * onehot - 1)), target).item()
        sharp = segmentation_loss(Tensor(4.0 * (2 * onehot - 1)), target).item()
        assert sharp < weak
