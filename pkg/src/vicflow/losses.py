"""Training losses: transport loss over mixed cost matrices and candidate
cross-entropy.

Both cost matrices share one bidirectional contrast normalization: scores
are z-scored, exponentiated and divided by the sum of their row and column
totals, so a pair is cheap exactly when it dominates both its row and its
column. Displacement costs enter negated (small displacement cost means a
geometrically plausible pair), appearance similarities enter as-is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .assignment import TransportPlan, hungarian, sinkhorn
from .kernels import Tensor

__all__ = [
    "CostPair",
    "CandidateSet",
    "displacement_cost",
    "appearance_cost",
    "combine_costs",
    "transport_loss",
    "select_candidates",
    "classification_loss",
    "total_loss",
]

_Z_EPS = 1e-8  # smoothing for the z-score denominator
_P_CLAMP = 1e-7  # probability clamp for the cross entropy


@dataclass(frozen=True)
class CostPair:
    """Displacement and appearance cost matrices with their mix."""

    c_disp: Tensor | None  # n x m, entries in [0, 1)
    c_appear: Tensor | None  # n x m, entries in [0, 1)
    combined: Tensor  # n x m
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda-out-of-range")
        cd = self.c_disp.data if self.c_disp is not None else np.zeros_like(self.combined.data)
        ca = self.c_appear.data if self.c_appear is not None else np.zeros_like(self.combined.data)
        expected = self.lam * cd + (1.0 - self.lam) * ca
        if not np.array_equal(self.combined.data, expected):
            raise ValueError("mix-inconsistency: combined must be the exact lambda mix")


@dataclass(frozen=True)
class CandidateSet:
    """Supervision pairs for the matcher head.

    Positives are every cross-frame pair within the grouping radius;
    negatives are assignment-proposed anchors that fall outside it.
    """

    positives: tuple[tuple[int, int], ...]  # (current idx, previous idx)
    negatives: tuple[tuple[int, int], ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple((int(j), int(i)) for j, i in self.positives))
        object.__setattr__(self, "negatives", tuple((int(j), int(i)) for j, i in self.negatives))
        if set(self.positives) & set(self.negatives):
            raise ValueError("candidate-overlap: a pair cannot be both positive and negative")

    def __len__(self) -> int:
        return len(self.positives) + len(self.negatives)


def _zscore(x: Tensor) -> Tensor:
    mu = K.mean_all(x)
    diff = K.sub(x, mu)
    sigma = K.sqrt(K.mean_all(K.mul(diff, diff)))
    return K.div(diff, K.add(sigma, _Z_EPS))


def _bidirectional_cost(score: Tensor) -> Tensor:
    """1 - e_ij / (row_sum_i + col_sum_j - e_ij) with e = exp(z-score).

    Higher score means a more plausible pair and therefore a lower cost.
    Entries land in [0, 1) because the denominator contains e_ij plus the
    non-negative remainder of its row and column.
    """
    e = K.exp(_zscore(score))
    rows = K.sum_axis(e, 1, keepdims=True)
    cols = K.sum_axis(e, 0, keepdims=True)
    denom = K.sub(K.add(rows, cols), e)
    return K.sub(1.0, K.div(e, denom))


def displacement_cost(prior_cost) -> Tensor:
    """Displacement cost matrix from pairwise prior costs.

    The prior cost grows with displacement, so it enters the contrast
    normalization negated: the geometrically nearest pair of a row/column
    ends up with the minimal cost. Invariant under affine maps of the input
    (the z-score absorbs them up to the smoothing epsilon).
    """
    gamma = K.as_tensor(prior_cost)
    if gamma.ndim != 2 or gamma.size == 0:
        raise ValueError(f"shape-mismatch: prior cost must be a non-empty matrix, got {gamma.shape}")
    return _bidirectional_cost(K.neg(gamma))


def appearance_cost(f_prev, f_curr) -> Tensor:
    """Appearance cost from cosine similarity of enriched features.

    Similarities are pushed through the identical bidirectional form as the
    displacement cost, which makes the two matrices commensurable before the
    lambda mix.
    """
    f_prev, f_curr = K.as_tensor(f_prev), K.as_tensor(f_curr)
    if f_prev.ndim != 2 or f_curr.ndim != 2 or f_prev.shape[1] != f_curr.shape[1]:
        raise ValueError("shape-mismatch: feature matrices incompatible")
    if f_prev.shape[0] == 0 or f_curr.shape[0] == 0:
        raise ValueError("shape-mismatch: empty feature matrix")
    n = f_curr.shape[0]
    m = f_prev.shape[0]
    norm_c = K.sqrt(K.sum_axis(K.mul(f_curr, f_curr), 1))
    norm_p = K.sqrt(K.sum_axis(K.mul(f_prev, f_prev), 1))
    if norm_c.data.min() <= 0.0 or norm_p.data.min() <= 0.0:
        raise ValueError("zero-norm-feature")
    sim = K.div(
        K.matmul(f_curr, K.transpose(f_prev)),
        K.mul(K.reshape(norm_c, (n, 1)), K.reshape(norm_p, (1, m))),
    )
    return _bidirectional_cost(sim)


def combine_costs(c_disp: Tensor | None, c_appear: Tensor | None, lam: float) -> CostPair:
    """Mix cost matrices: lam * displacement + (1 - lam) * appearance."""
    if c_disp is None and c_appear is None:
        raise ValueError("no-cost-given")
    ref = c_disp if c_disp is not None else c_appear
    zero = Tensor(np.zeros(ref.shape))
    cd = c_disp if c_disp is not None else zero
    ca = c_appear if c_appear is not None else zero
    combined = K.add(K.mul(cd, lam), K.mul(ca, 1.0 - lam))
    return CostPair(c_disp=c_disp, c_appear=c_appear, combined=combined, lam=lam)


def transport_loss(
    cost_pair: CostPair,
    epsilon: float = 0.1,
    max_iter: int = 500,
    tol: float = 1e-6,
    sign: str = "cost_minimizing",
) -> tuple[Tensor, TransportPlan]:
    """Optimal-transport loss over the mixed cost matrix.

    The plan is solved by Sinkhorn on the detached cost and treated as a
    constant, so gradients flow through the cost entries only (envelope
    treatment). The default sign minimizes the plan cost; ``sign='literal'``
    flips it to the negated form, under which descent *increases* the
    matched-pair cost, and is kept only for comparison.
    """
    plan = sinkhorn(cost_pair.combined.data, epsilon=epsilon, max_iter=max_iter, tol=tol)
    loss = K.sum_all(K.mul(cost_pair.combined, Tensor(plan.plan)))
    if sign == "literal":
        loss = K.neg(loss)
    elif sign != "cost_minimizing":
        raise ValueError(f"unknown-loss-sign: {sign}")
    return loss, plan


def select_candidates(prev_pos, curr_pos, probabilities, radius: float = 0.2) -> CandidateSet:
    """Pick supervision pairs for the matcher head.

    Positives: every (current, previous) pair whose cross-frame normalized
    distance is within ``radius`` (boundary inclusive). Negatives: anchor
    pairs proposed by a Hungarian assignment on (1 - probabilities) that are
    not positives.
    """
    prev_pos = np.asarray(prev_pos, dtype=np.float64).reshape(-1, 2)
    curr_pos = np.asarray(curr_pos, dtype=np.float64).reshape(-1, 2)
    p = np.asarray(probabilities, dtype=np.float64)
    n, m = curr_pos.shape[0], prev_pos.shape[0]
    if p.shape != (n, m):
        raise ValueError(f"shape-mismatch: probabilities {p.shape} for n={n}, m={m}")
    if n == 0 or m == 0:
        return CandidateSet(positives=(), negatives=(), radius=radius)

    dist = np.linalg.norm(curr_pos[:, None, :] - prev_pos[None, :, :], axis=-1)
    positives = [(j, i) for j in range(n) for i in range(m) if dist[j, i] <= radius]
    pos_set = set(positives)
    anchors, _ = hungarian(1.0 - p)
    negatives = [(j, i) for j, i in anchors if (j, i) not in pos_set]
    return CandidateSet(positives=tuple(positives), negatives=tuple(negatives), radius=radius)


def classification_loss(probabilities, candidates: CandidateSet) -> Tensor:
    """Mean binary cross entropy over the candidate pairs.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs. An empty
    candidate set contributes zero loss.
    """
    pairs = list(candidates.positives) + list(candidates.negatives)
    if not pairs:
        return Tensor(np.asarray(0.0))
    p = K.as_tensor(probabilities)
    rows = [j for j, _ in pairs]
    cols = [i for _, i in pairs]
    y = np.concatenate([np.ones(len(candidates.positives)), np.zeros(len(candidates.negatives))])
    picked = K.clamp(K.gather_pairs(p, rows, cols), _P_CLAMP, 1.0 - _P_CLAMP)
    per_pair = K.add(K.mul(Tensor(y), K.log(picked)), K.mul(Tensor(1.0 - y), K.log(K.sub(1.0, picked))))
    return K.neg(K.mean_all(per_pair))


def total_loss(dot, cls) -> Tensor:
    """Unweighted sum of the transport and classification losses."""
    return K.add(K.as_tensor(dot), K.as_tensor(cls))
