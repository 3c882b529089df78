"""Optimization: adaptive moment optimizer, decay schedule, train loop.

One optimization step consumes one synthetic 8-frame clip: the engine
propagates the first-frame mask, per-frame losses are averaged, and a
single backward pass drives the update. Memory tensors are detached
inside the engine every few frames, so gradients flow through a bounded
window of the recurrence.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from memvos import metrics, synthetic
from memvos.autodiff import Parameter
from memvos.engine import VosEngine

TRAIN_SEED_STRIDE = 100_000


def polynomial_lr(step: int, total_steps: int, lr_start: float = 2e-4,
                  lr_end: float = 2e-5, power: float = 0.9) -> float:
    """Polynomial decay hitting both endpoints exactly.

    The first step uses lr_start and step >= total_steps returns
    lr_end, clamped rather than recomputed so the endpoints are exact
    in floating point.
    """
    if total_steps < 1:
        raise ValueError("total_steps must be positive")
    if step <= 0:
        return lr_start
    if step >= total_steps:
        return lr_end
    frac = 1.0 - step / total_steps
    return lr_end + (lr_start - lr_end) * frac ** power


class AdamOptimizer:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    steps: int = 1200
    seed: int = 0
    clip_frames: int = 8
    pool_size: int = 250
    lr_start: float = 2e-4
    lr_end: float = 2e-5
    lr_power: float = 0.9
    log_every: int = 25

    def validate(self) -> "TrainConfig":
        # zero steps is legal: train then writes an untouched model
        if self.steps < 0:
            raise ValueError(f"steps: {self.steps} must not be negative")
        if self.clip_frames < 2:
            raise ValueError(f"clip_frames: {self.clip_frames} must be at least 2")
        if self.pool_size < 1:
            raise ValueError(f"pool_size: {self.pool_size} must be positive")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("lr_start/lr_end must be positive")
        if self.log_every < 1:
            raise ValueError(f"log_every: {self.log_every} must be positive")
        return self


@dataclass
class TrainRecord:
    step: int
    loss: float
    lr: float
    seconds: float


def train(engine: VosEngine, config: TrainConfig,
          on_record: Optional[Callable[[TrainRecord], None]] = None) -> List[TrainRecord]:
    """Run the loop; returns the per-log-interval loss records.

    Training cycles through a finite pool of ``pool_size`` distinct
    clips so the model revisits each scene several times per schedule.
    Clip seeds are ``seed * 100000 + (step mod pool_size)``, far below
    the benchmark seed range, so training never sees an evaluation
    clip.
    """
    config.validate()
    frame_size = engine.config.frame_size
    opt = AdamOptimizer(engine.model.parameters())
    records: List[TrainRecord] = []
    started = time.time()
    window: List[float] = []
    for step in range(config.steps):
        clip_seed = config.seed * TRAIN_SEED_STRIDE + step % config.pool_size
        clip = synthetic.training_clip(clip_seed,
                                       num_frames=config.clip_frames,
                                       height=frame_size, width=frame_size)
        opt.zero_grad()
        result = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects,
                                 teacher_masks=clip.masks, train=True)
        total = result.frame_losses[0]
        for fl in result.frame_losses[1:]:
            total = total + fl
        loss = total.item() / len(result.frame_losses)
        total.backward(np.full((), 1.0 / len(result.frame_losses),
                               dtype=total.data.dtype))
        lr = polynomial_lr(step, config.steps, config.lr_start, config.lr_end,
                           config.lr_power)
        opt.step(lr)
        window.append(loss)
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            rec = TrainRecord(step=step + 1, loss=float(np.mean(window)), lr=lr,
                              seconds=time.time() - started)
            records.append(rec)
            window.clear()
            if on_record is not None:
                on_record(rec)
    return records


def write_curve(path: str, records: Sequence[TrainRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "seconds"])
        for r in records:
            writer.writerow([r.step, f"{r.loss:.6f}", f"{r.lr:.8g}", f"{r.seconds:.2f}"])


def evaluate(engine: VosEngine, clips: Sequence[synthetic.Clip],
             tolerance_px: int = 2) -> dict:
    """Propagate each clip and average mask quality over the set."""
    per_clip = []
    for clip in clips:
        result = engine.run_clip(clip.frames, clip.masks[0], clip.num_objects)
        scores = metrics.evaluate_masks(result.masks, clip.masks, clip.num_objects,
                                        tolerance_px=tolerance_px)
        scores["category"] = clip.category
        per_clip.append(scores)
    summary = metrics.summarize(per_clip)
    summary["per_clip"] = per_clip
    return summary
