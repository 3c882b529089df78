"""Training objectives on per-pixel class score maps.

Both losses take a logit map of shape [M+1, H, W] with channel 0 the
background, and an integer target map [H, W]. The cross entropy goes
through a fused log-softmax so that a pixel the model gets confidently
wrong still carries a full-strength gradient; the region loss works on
the softmaxed probabilities. They are combined 1:1 for training.
"""

from __future__ import annotations

import numpy as np

from memvos import autodiff as ad
from memvos.autodiff import Tensor


def _target_onehot(c: int, target: np.ndarray, dtype) -> np.ndarray:
    h, w = target.shape
    onehot = np.zeros((c, h, w), dtype=dtype)
    onehot.reshape(c, -1)[target.reshape(-1), np.arange(h * w)] = 1.0
    return onehot


def cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean negative log probability of the true id at each pixel."""
    c, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (h, w):
        raise ad.ShapeError(f"target {target.shape} does not match logit map {(h, w)}")
    onehot = _target_onehot(c, target, logits.data.dtype)
    picked = (ad.log_softmax(logits, axis=0) * Tensor(onehot)).sum()
    return ad.scale(picked, -1.0 / (h * w))


def soft_region_loss(probs: Tensor, target: np.ndarray) -> Tensor:
    """One minus the soft intersection-over-union, averaged over classes.

    Uses probabilities directly instead of hard masks, so it stays
    differentiable; classes absent from both prediction and target
    contribute zero loss through the +1 smoothing.
    """
    c, h, w = probs.shape
    target = np.asarray(target)
    tgt = Tensor(_target_onehot(c, target, probs.data.dtype))
    inter = (probs * tgt).sum(axis=(1, 2))
    union = probs.sum(axis=(1, 2)) + tgt.sum(axis=(1, 2)) - inter
    one = Tensor(np.ones(c, dtype=probs.data.dtype))
    jacc = (inter + one) / (union + one)
    return (one - jacc).mean()


def segmentation_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Equal-weight sum of cross entropy and the soft region loss."""
    return cross_entropy(logits, target) + soft_region_loss(
        ad.softmax(logits, axis=0), target)
