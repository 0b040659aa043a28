"""Gradient-descent training loop over frame pairs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .core import DescriptorSet, FramePoints, ModelParams
from .kernels import GradTape
from .pipeline import pair_loss

__all__ = ["TrainingCurve", "collect_pairs", "fit"]


@dataclass
class TrainingCurve:
    epoch_losses: list[float]

    def final(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def collect_pairs(
    sequences: list[tuple[list[FramePoints], list[DescriptorSet]]],
    interval: int = 1,
) -> list[tuple[DescriptorSet, DescriptorSet]]:
    """Visible-point descriptor pairs at the given stride, empty pairs dropped."""
    pairs = []
    for frames, descriptors in sequences:
        sampled = list(range(0, len(frames), interval))
        for k in range(1, len(sampled)):
            a, b = sampled[k - 1], sampled[k]
            prev_set = descriptors[a].take(frames[a].visible_index())
            curr_set = descriptors[b].take(frames[b].visible_index())
            if prev_set.count and curr_set.count:
                pairs.append((prev_set, curr_set))
    return pairs


def fit(params: ModelParams, pairs, config: RunConfig) -> TrainingCurve:
    """Plain gradient descent with decoupled weight decay, in place.

    One update per frame pair, in a fixed order, so a run is a pure function
    of the initial parameters and the pair list. Raises on a non-finite loss
    with enough context to find the offending pair.
    """
    arrays = dict(params.named_arrays())
    lr = config.learning_rate
    wd = config.weight_decay
    curve: list[float] = []
    for epoch in range(config.epochs):
        losses = []
        for idx, (prev_set, curr_set) in enumerate(pairs):
            tape = GradTape()
            pt = params.as_tensors(tape)
            out = pair_loss(prev_set, curr_set, pt, config)
            value = out.loss.item()
            if not math.isfinite(value):
                raise ValueError(
                    f"non-finite-loss: epoch {epoch}, pair {idx}, "
                    f"transport {out.transport}, classification {out.classification}"
                )
            tape.backward(out.loss)
            for name, grad in pt.gradients():
                arr = arrays[name]
                arr -= lr * (grad + wd * arr)
            losses.append(value)
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return TrainingCurve(epoch_losses=curve)
