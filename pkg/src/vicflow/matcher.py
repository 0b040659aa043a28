"""One-to-many pairwise matching.

Each cross-frame pair gets an elementwise feature product, optionally
modulated coarse-to-fine by the pair's displacement-prior embedding, and an
MLP head turns it into a match probability. Flows are then derived from
pedestrian *coverage*: an individual is accounted for as soon as at least
one match touches it, which is what keeps one-to-many counts well-defined
(the raw pair sum can exceed the number of pedestrians).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .assignment import hungarian
from .core import MatchResult, ParamTensors
from .kernels import Tensor

__all__ = [
    "PairSimilarity",
    "ModulatedFeature",
    "pair_similarity",
    "modulate",
    "match_probability",
    "pair_probabilities",
    "derive_flows",
    "derive_flows_o2o",
]


@dataclass(frozen=True)
class PairSimilarity:
    """Elementwise product of two pedestrian features, flat and as a patch."""

    vector: Tensor  # (d,)
    spatial: Tensor  # (h, w, c)

    def __post_init__(self):
        h, w, c = self.spatial.shape
        if self.vector.shape != (h * w * c,):
            raise ValueError("shape-mismatch: spatial reshape does not cover vector")
        if not np.array_equal(self.spatial.data.reshape(-1), self.vector.data):
            raise ValueError("reshape-inconsistency: spatial must be a view of vector")


@dataclass(frozen=True)
class ModulatedFeature:
    """Coarse/fine displacement-modulated pair feature and their fusion."""

    coarse: Tensor  # (c,)
    fine: Tensor  # (h, w, c)
    fused: Tensor  # (c,)

    def __post_init__(self):
        expected = self.coarse.data + self.fine.data.mean(axis=(0, 1))
        if not np.array_equal(self.fused.data, expected):
            raise ValueError("fusion-inconsistency: fused must equal coarse + GAP(fine)")


def pair_similarity(f_prev, f_curr, patch_shape: tuple[int, int]) -> PairSimilarity:
    f_prev, f_curr = K.as_tensor(f_prev), K.as_tensor(f_curr)
    if f_prev.shape != f_curr.shape or f_prev.ndim != 1:
        raise ValueError(f"dimension-mismatch: {f_prev.shape} vs {f_curr.shape}")
    h, w = patch_shape
    d = f_prev.shape[0]
    if d % (h * w) != 0:
        raise ValueError(f"dimension-indivisible: d={d} for patch {patch_shape}")
    vector = K.mul(f_prev, f_curr)
    spatial = K.reshape(vector, (h, w, d // (h * w)))
    return PairSimilarity(vector=vector, spatial=spatial)


def _broadcast_patch(prior_vec: Tensor, h: int, w: int, c: int) -> Tensor:
    # tile the pair's embedding over every spatial position
    return K.mul(K.reshape(prior_vec, (1, 1, c)), Tensor(np.ones((h, w, 1))))


def modulate(sim: PairSimilarity, prior_vec, pt: ParamTensors) -> ModulatedFeature:
    """Coarse-to-fine modulation of a pair feature by its prior embedding.

    Coarse: layer-normalized linear projection of the flat similarity.
    Fine: a 1x1 convolution over the patch channels, scaled and shifted by
    linear maps of the broadcast prior embedding. Fused adds the pooled fine
    response to the coarse one.
    """
    h, w, c = sim.spatial.shape
    prior_vec = K.as_tensor(prior_vec)
    if prior_vec.shape != (c,):
        raise ValueError(f"shape-mismatch: prior embedding {prior_vec.shape}, expected ({c},)")

    coarse = K.reshape(
        K.layer_norm(K.add(K.matmul(K.reshape(sim.vector, (1, sim.vector.shape[0])), pt.delta_w), pt.delta_b)),
        (c,),
    )

    patch = _broadcast_patch(prior_vec, h, w, c)
    conv = K.reshape(K.add(K.matmul(K.reshape(sim.spatial, (h * w, c)), pt.conv_w), pt.conv_b), (h, w, c))
    scale = K.reshape(K.add(K.matmul(K.reshape(patch, (h * w, c)), pt.alpha_w), pt.alpha_b), (h, w, c))
    shift = K.reshape(K.add(K.matmul(K.reshape(patch, (h * w, c)), pt.beta_w), pt.beta_b), (h, w, c))
    fine = K.add(K.mul(scale, K.relu(conv)), shift)

    fused = K.add(coarse, K.global_avg_pool(fine))
    return ModulatedFeature(coarse=coarse, fine=fine, fused=fused)


def _head(z: Tensor, pt: ParamTensors) -> Tensor:
    """MLP head ending in a single logit; ReLU between hidden layers."""
    x = z
    for i, (w, b) in enumerate(pt.head):
        x = K.add(K.matmul(x, w), b)
        if i + 1 < len(pt.head):
            x = K.relu(x)
    return x


def match_probability(feature, pt: ParamTensors) -> Tensor:
    """Probability that a candidate pair is a match.

    Accepts a :class:`ModulatedFeature` (its fused vector), a
    :class:`PairSimilarity` (the raw product, used when the modulator is
    disabled), or any 1-d tensor such as a concat-fused feature.
    """
    if isinstance(feature, ModulatedFeature):
        z = feature.fused
    elif isinstance(feature, PairSimilarity):
        z = feature.vector
    else:
        z = K.as_tensor(feature)
    logit = _head(K.reshape(z, (1, z.shape[0])), pt)
    return K.reshape(K.sigmoid(logit), ())


def pair_probabilities(
    f_prev: Tensor,
    f_curr: Tensor,
    prior_embedding: Tensor | None,
    pt: ParamTensors,
    mode: str = "modulate",
) -> Tensor:
    """All n x m match probabilities at once.

    Vectorized equivalent of pair_similarity -> modulate -> match_probability
    over the full pair grid; the per-pair path is kept for tests and the two
    are asserted to agree.
    """
    m = f_prev.shape[0]
    n = f_curr.shape[0]
    d = pt.meta.d
    h, w = pt.meta.patch_shape
    c = pt.meta.channels
    if n == 0 or m == 0:
        return Tensor(np.zeros((n, m)))

    s_all = K.reshape(
        K.mul(K.reshape(f_curr, (n, 1, d)), K.reshape(f_prev, (1, m, d))),
        (n * m, d),
    )

    if mode == "plain":
        z = s_all
    else:
        if prior_embedding is None:
            raise ValueError("prior-required: displacement embedding needed for mode " + mode)
        p_flat = K.reshape(prior_embedding, (n * m, c))
        if mode == "concat":
            z = K.concat([s_all, p_flat], axis=1)
        elif mode == "modulate":
            coarse = K.layer_norm(K.add(K.matmul(s_all, pt.delta_w), pt.delta_b))
            conv = K.relu(
                K.reshape(K.add(K.matmul(K.reshape(s_all, (n * m * h * w, c)), pt.conv_w), pt.conv_b), (n * m, h * w, c))
            )
            scale = K.reshape(K.add(K.matmul(p_flat, pt.alpha_w), pt.alpha_b), (n * m, 1, c))
            shift = K.reshape(K.add(K.matmul(p_flat, pt.beta_w), pt.beta_b), (n * m, 1, c))
            fine = K.add(K.mul(scale, conv), shift)
            z = K.add(coarse, K.mean_axis(fine, 1))
        else:
            raise ValueError(f"unknown-fusion-mode: {mode}")

    logits = _head(z, pt)
    return K.reshape(K.sigmoid(logits), (n, m))


def _cap_rows(match: np.ndarray, probabilities: np.ndarray, eta: int) -> np.ndarray:
    """Keep at most eta matches per row: highest probability, then lowest column."""
    capped = match.copy()
    for j in range(match.shape[0]):
        cols = np.flatnonzero(capped[j])
        if cols.size > eta:
            keep = sorted(cols, key=lambda i: (-probabilities[j, i], i))[:eta]
            capped[j] = 0
            capped[j, keep] = 1
    return capped


def derive_flows(probabilities, eta: int = 5, counting: str = "coverage") -> MatchResult:
    """Threshold probabilities into a capped match matrix and count flows.

    Coverage counting: inflow is the number of current-frame pedestrians no
    match touches, outflow the number of previous-frame pedestrians no match
    touches. The literal pair-sum variant subtracts the total match count
    from each frame's pedestrian count (clipped into range); it is kept for
    comparison only.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"shape-mismatch: probabilities must be 2-d, got {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.isfinite(p).all()):
        raise ValueError("probability-out-of-range")
    if eta < 1:
        raise ValueError("group-cap-invalid")
    n, m = p.shape

    match = (p >= 0.5).astype(np.int8)
    match = _cap_rows(match, p, eta)
    effective = np.where(match == 1, p, 0.0)

    if counting == "coverage":
        inflow = n - int((match.sum(axis=1) > 0).sum())
        outflow = m - int((match.sum(axis=0) > 0).sum())
    elif counting == "pair_sum":
        total = int(match.sum())
        inflow = int(np.clip(n - total, 0, n))
        outflow = int(np.clip(m - total, 0, m))
    else:
        raise ValueError(f"unknown-counting-mode: {counting}")

    return MatchResult(probabilities=effective, match_matrix=match, inflow=inflow, outflow=outflow, group_cap=eta)


def derive_flows_o2o(probabilities) -> MatchResult:
    """One-to-one baseline: Hungarian assignment on (1 - p), then threshold.

    Pairs outside the assignment are suppressed, so each pedestrian is
    covered by at most one match in either direction.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"shape-mismatch: probabilities must be 2-d, got {p.shape}")
    if p.size and (p.min() < 0.0 or p.max() > 1.0 or not np.isfinite(p).all()):
        raise ValueError("probability-out-of-range")
    n, m = p.shape
    effective = np.zeros_like(p)
    if n and m:
        pairs, _ = hungarian(1.0 - p)
        for j, i in pairs:
            if p[j, i] >= 0.5:
                effective[j, i] = p[j, i]
    match = (effective >= 0.5).astype(np.int8)
    inflow = n - int((match.sum(axis=1) > 0).sum())
    outflow = m - int((match.sum(axis=0) > 0).sum())
    return MatchResult(probabilities=effective, match_matrix=match, inflow=inflow, outflow=outflow, group_cap=1)
