"""Sequence-level flux accumulation and counting metrics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .core import DescriptorSet, FramePoints, MatchResult, ModelParams, SequenceResult
from .matcher import derive_flows, derive_flows_o2o
from .pipeline import matcher_forward

__all__ = ["VideoEval", "accumulate", "metrics", "run_sequence", "truth_total"]


@dataclass(frozen=True)
class VideoEval:
    """Counting metrics over a set of videos.

    WRAE weights each video's relative error by its share of the total frame
    count and is reported in percent.
    """

    per_video: tuple[tuple[int, int, int], ...]  # (length, truth, predicted)
    mae: float
    mse: float
    wrae: float


def accumulate(first_count: int, inflows: Sequence[int], interval: int = 1) -> SequenceResult:
    """Unique-pedestrian total: first-frame count plus all pair inflows."""
    first_count = int(first_count)
    inflows = [int(v) for v in inflows]
    if first_count < 0 or any(v < 0 for v in inflows):
        raise ValueError("negative-input")
    return SequenceResult(
        first_frame_count=first_count,
        per_pair_inflows=tuple(inflows),
        total=first_count + sum(inflows),
        interval=interval,
    )


def metrics(per_video: Sequence[tuple[int, int, int]]) -> VideoEval:
    """MAE, MSE and length-weighted relative absolute error over videos."""
    if not per_video:
        raise ValueError("empty-evaluation")
    entries = tuple((int(t), int(n), int(nh)) for t, n, nh in per_video)
    lengths = np.array([t for t, _, _ in entries], dtype=np.float64)
    truth = np.array([n for _, n, _ in entries], dtype=np.float64)
    pred = np.array([nh for _, _, nh in entries], dtype=np.float64)
    if (truth <= 0).any():
        raise ValueError("zero-truth-count: WRAE undefined for a video with zero truth")
    err = np.abs(truth - pred)
    weights = lengths / lengths.sum()
    assert abs(weights.sum() - 1.0) <= 1e-12
    wrae = float((weights * err / truth).sum() * 100.0)
    return VideoEval(per_video=entries, mae=float(err.mean()), mse=float((err**2).mean()), wrae=wrae)


def run_sequence(
    frames: Sequence[FramePoints],
    descriptors: Sequence[DescriptorSet],
    params: ModelParams | None,
    config: RunConfig,
    oracle: Callable[[int, int], np.ndarray] | None = None,
) -> tuple[SequenceResult, list[MatchResult]]:
    """Count a video: pair frames at the configured stride and accumulate.

    Masked points are dropped before matching and never counted. With
    ``oracle`` given, ``oracle(prev_idx, curr_idx)`` supplies the match
    probabilities (over visible points) instead of the model.
    """
    if len(frames) == 0:
        raise ValueError("empty-sequence")
    if len(frames) != len(descriptors):
        raise ValueError("length-mismatch: frames vs descriptors")
    sampled = list(range(0, len(frames), config.interval))
    first = frames[sampled[0]]
    n0 = first.visible_count()

    pt = params.as_tensors() if params is not None else None
    results: list[MatchResult] = []
    for k in range(1, len(sampled)):
        a, b = sampled[k - 1], sampled[k]
        vis_prev = frames[a].visible_index()
        vis_curr = frames[b].visible_index()
        prev_set = descriptors[a].take(vis_prev)
        curr_set = descriptors[b].take(vis_curr)
        if oracle is not None:
            probs = np.asarray(oracle(a, b), dtype=np.float64)
        elif pt is not None:
            probs = matcher_forward(prev_set, curr_set, pt, config).probabilities.data
        else:
            raise ValueError("missing-model: neither params nor oracle given")
        if config.o2m:
            results.append(derive_flows(probs, eta=config.eta, counting=config.flow_counting))
        else:
            results.append(derive_flows_o2o(probs))

    seq = accumulate(n0, [r.inflow for r in results], interval=config.interval)
    return seq, results


def truth_total(frames: Sequence[FramePoints], interval: int = 1) -> int:
    """Ground-truth unique count of a sequence at the given stride.

    With identities present this is the first-frame visible count plus the
    per-pair count of newly visible identities. Without identities it falls
    back to label accounting (inflow/both labels), which is only valid at
    the stride the labels were annotated for (stride 1 here).
    """
    sampled = list(range(0, len(frames), interval))
    if not sampled:
        raise ValueError("empty-sequence")
    if all(frames[i].identity is not None for i in sampled):
        prev_vis: set[int] = set()
        total = 0
        for idx in sampled:
            f = frames[idx]
            vis = set(int(v) for v in f.identity[~f.masked])
            total += len(vis - prev_vis)
            prev_vis = vis
        return total
    if interval != 1:
        raise ValueError("missing-identity: label-based truth is only valid at stride 1")
    total = frames[0].visible_count()
    for f in frames[1:]:
        for lab, masked in zip(f.labels, f.masked):
            if not masked and lab in ("inflow", "both"):
                total += 1
    return total
