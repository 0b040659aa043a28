"""Domain types shared across the package.

All types are immutable value objects after construction and verify their
structural invariants at construction time; they are safe to share across
threads. ``FramePoints`` is the exception: it can hold invalid data so that
ingestion can report the first violated invariant via :func:`validate`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .kernels import Tensor, sigmoid

LABELS = ("pedestrian", "inflow", "outflow", "both")


@dataclass(frozen=True)
class FramePoints:
    """Located pedestrians of a single frame.

    Coordinates are normalized by frame width/height to [0, 1]. ``masked``
    points sit inside an annotation mask and are excluded from every count
    and loss. ``identity`` is populated by the simulator only.
    """

    frame_id: int
    points: np.ndarray  # count x 2
    labels: tuple[str, ...]
    masked: np.ndarray  # count, bool
    identity: Optional[np.ndarray] = None  # count, int

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "masked", np.asarray(self.masked, dtype=bool).reshape(-1))
        if self.identity is not None:
            object.__setattr__(self, "identity", np.asarray(self.identity, dtype=np.int64).reshape(-1))

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def visible_index(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    def visible_count(self) -> int:
        return int((~self.masked).sum())


def validate(frame: FramePoints) -> Optional[str]:
    """Return the first violated invariant of ``frame``, or None if valid."""
    n = frame.points.shape[0]
    if len(frame.labels) != n:
        return f"length-mismatch: {len(frame.labels)} labels for {n} points"
    if frame.masked.shape[0] != n:
        return f"length-mismatch: {frame.masked.shape[0]} mask flags for {n} points"
    if frame.identity is not None and frame.identity.shape[0] != n:
        return f"length-mismatch: {frame.identity.shape[0]} identities for {n} points"
    if n and not np.isfinite(frame.points).all():
        return "coordinate-out-of-range: non-finite coordinate"
    if n and (frame.points.min() < 0.0 or frame.points.max() > 1.0):
        bad = np.argwhere((frame.points < 0.0) | (frame.points > 1.0))[0]
        return f"coordinate-out-of-range: point {bad[0]} axis {bad[1]}"
    for i, lab in enumerate(frame.labels):
        if lab not in LABELS:
            return f"unknown-label: {lab!r} at point {i}"
    return None


@dataclass(frozen=True)
class DescriptorSet:
    """Per-pedestrian feature vectors with attached normalized positions."""

    features: np.ndarray  # count x d
    positions: np.ndarray  # count x 2
    patch_shape: tuple[int, int]

    def __post_init__(self):
        object.__setattr__(self, "features", np.asarray(self.features, dtype=np.float64))
        object.__setattr__(self, "positions", np.asarray(self.positions, dtype=np.float64).reshape(-1, 2))
        object.__setattr__(self, "patch_shape", (int(self.patch_shape[0]), int(self.patch_shape[1])))
        f, p = self.features, self.positions
        if f.ndim != 2:
            raise ValueError(f"shape-mismatch: features must be 2-d, got {f.shape}")
        if f.shape[0] != p.shape[0]:
            raise ValueError(f"shape-mismatch: {f.shape[0]} features vs {p.shape[0]} positions")
        h, w = self.patch_shape
        if h < 1 or w < 1 or f.shape[1] % (h * w) != 0:
            raise ValueError(f"dimension-indivisible: d={f.shape[1]} not divisible by h*w={h * w}")
        if f.size and not np.isfinite(f).all():
            raise ValueError("non-finite-feature")

    @property
    def count(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, index: np.ndarray) -> "DescriptorSet":
        return DescriptorSet(self.features[index], self.positions[index], self.patch_shape)


@dataclass(frozen=True)
class AttentionQuadrants:
    """The four sub-blocks of a cross-frame self-attention map.

    Reassembling ``[[prev, cls], [match, curr]]`` reproduces the full
    (m+n) x (m+n) map bit-exactly; rows of the full (pre-modulation) map sum
    to one because it is a softmax output.
    """

    prev: np.ndarray  # m x m
    cls: np.ndarray  # m x n
    match: np.ndarray  # n x m
    curr: np.ndarray  # n x n

    def __post_init__(self):
        for name in ("prev", "cls", "match", "curr"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        m = self.prev.shape[0]
        n = self.curr.shape[0]
        if self.prev.shape != (m, m) or self.curr.shape != (n, n):
            raise ValueError("shape-mismatch: diagonal blocks must be square")
        if self.cls.shape != (m, n) or self.match.shape != (n, m):
            raise ValueError(f"shape-mismatch: cross blocks {self.cls.shape}/{self.match.shape} for m={m}, n={n}")
        full = self.reassemble()
        if full.shape[0] and not np.allclose(full.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("row-sum: attention rows must sum to 1 within 1e-9")

    @property
    def m(self) -> int:
        return self.prev.shape[0]

    @property
    def n(self) -> int:
        return self.curr.shape[0]

    def reassemble(self) -> np.ndarray:
        top = np.concatenate([self.prev, self.cls], axis=1)
        bottom = np.concatenate([self.match, self.curr], axis=1)
        return np.concatenate([top, bottom], axis=0)


@dataclass(frozen=True)
class PriorField:
    """Pairwise displacement tensor with its learned embedding and costs.

    ``embedding``, ``prior_cost`` and ``full_cost`` are :class:`Tensor`
    because gradients flow through them during training; ``displacement`` is
    a constant of the geometry.
    """

    displacement: np.ndarray  # n x m x 2
    embedding: Tensor  # n x m x c
    prior_cost: Tensor  # n x m
    full_cost: Tensor  # (m+n) x (m+n)

    def __post_init__(self):
        object.__setattr__(self, "displacement", np.asarray(self.displacement, dtype=np.float64))
        d = self.displacement
        if d.ndim != 3 or d.shape[2] != 2:
            raise ValueError(f"shape-mismatch: displacement must be n x m x 2, got {d.shape}")
        n, m = d.shape[:2]
        if self.embedding.shape[:2] != (n, m):
            raise ValueError("shape-mismatch: embedding does not cover the pair grid")
        if self.prior_cost.shape != (n, m):
            raise ValueError("shape-mismatch: prior_cost must be n x m")
        if self.full_cost.shape != (m + n, m + n):
            raise ValueError("shape-mismatch: full_cost must cover all token pairs")
        if self.prior_cost.size and self.prior_cost.data.min() < 0.0:
            raise ValueError("negative-prior-cost")

    @property
    def n(self) -> int:
        return self.displacement.shape[0]

    @property
    def m(self) -> int:
        return self.displacement.shape[1]


@dataclass(frozen=True)
class MatchResult:
    """Match probabilities, the binary one-to-many match matrix and flows.

    ``probabilities`` holds *effective* probabilities: entries suppressed by
    the per-row group cap (or by a one-to-one assignment baseline) are zeroed
    so that ``match_matrix == (probabilities >= 0.5)`` holds exactly.
    """

    probabilities: np.ndarray  # n x m
    match_matrix: np.ndarray  # n x m, {0,1}
    inflow: int
    outflow: int
    group_cap: int

    def __post_init__(self):
        object.__setattr__(self, "probabilities", np.asarray(self.probabilities, dtype=np.float64))
        object.__setattr__(self, "match_matrix", np.asarray(self.match_matrix, dtype=np.int8))
        p, mm = self.probabilities, self.match_matrix
        if p.shape != mm.shape:
            raise ValueError("shape-mismatch: probabilities vs match_matrix")
        if p.size:
            if p.min() < 0.0 or p.max() > 1.0:
                raise ValueError("probability-out-of-range")
            if not np.array_equal(mm, (p >= 0.5).astype(np.int8)):
                raise ValueError("threshold-inconsistency: match_matrix must equal probabilities >= 0.5")
            if mm.sum(axis=1).max(initial=0) > self.group_cap:
                raise ValueError("group-cap-exceeded")
        n, m = p.shape
        if not (0 <= self.inflow <= n and 0 <= self.outflow <= m):
            raise ValueError("flow-out-of-range")
        if self.group_cap < 1:
            raise ValueError("group-cap-invalid")

    @property
    def n(self) -> int:
        return self.probabilities.shape[0]

    @property
    def m(self) -> int:
        return self.probabilities.shape[1]


@dataclass(frozen=True)
class SequenceResult:
    """Video-level unique-pedestrian count: first frame plus accumulated inflows."""

    first_frame_count: int
    per_pair_inflows: tuple[int, ...]
    total: int
    interval: int = 1

    def __post_init__(self):
        object.__setattr__(self, "per_pair_inflows", tuple(int(v) for v in self.per_pair_inflows))
        if self.first_frame_count < 0 or any(v < 0 for v in self.per_pair_inflows):
            raise ValueError("negative-input")
        if self.interval < 1:
            raise ValueError("interval-invalid")
        if self.total != self.first_frame_count + sum(self.per_pair_inflows):
            raise ValueError("total-mismatch: total must equal first count plus inflows")


@dataclass
class ModelParams:
    """Learned parameters of the matching model.

    ``theta_raw`` reparameterizes the attention decay base as
    theta = sigmoid(theta_raw), guaranteeing theta in (0, 1). The projection
    ``phi`` (displacement -> embedding) carries no bias terms so that a zero
    displacement always embeds to zero. ``head`` consumes the fused pair
    feature; its input width depends on ``head_mode`` (plain: d,
    modulate: d/hw, concat: d + d/hw).
    """

    d: int
    patch_shape: tuple[int, int]
    heads: int
    head_mode: str  # 'plain' | 'modulate' | 'concat'
    phi_activation: str  # 'tanh' | 'relu' | 'identity'
    lam: float
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    theta_raw: np.ndarray  # scalar
    phi_w1: np.ndarray  # 2 x hidden
    phi_w2: np.ndarray  # hidden x c
    g_w: np.ndarray  # (d+1) x d
    g_b: np.ndarray  # d
    delta_w: np.ndarray  # d x c
    delta_b: np.ndarray  # c
    conv_w: np.ndarray  # c x c  (1x1 convolution over channels)
    conv_b: np.ndarray  # c
    alpha_w: np.ndarray  # c x c
    alpha_b: np.ndarray  # c
    beta_w: np.ndarray  # c x c
    beta_b: np.ndarray  # c
    head: list  # [(w, b), ...] final width 1
    embed_w: np.ndarray  # d_in x d
    embed_b: np.ndarray  # d

    @property
    def channels(self) -> int:
        h, w = self.patch_shape
        return self.d // (h * w)

    @property
    def theta(self) -> float:
        return float(sigmoid(Tensor(self.theta_raw)).data)

    def named_arrays(self):
        """Yield (name, array) for every trainable tensor, in a fixed order."""
        fixed = [
            ("w_q", self.w_q),
            ("w_k", self.w_k),
            ("w_v", self.w_v),
            ("theta_raw", self.theta_raw),
            ("phi_w1", self.phi_w1),
            ("phi_w2", self.phi_w2),
            ("g_w", self.g_w),
            ("g_b", self.g_b),
            ("delta_w", self.delta_w),
            ("delta_b", self.delta_b),
            ("conv_w", self.conv_w),
            ("conv_b", self.conv_b),
            ("alpha_w", self.alpha_w),
            ("alpha_b", self.alpha_b),
            ("beta_w", self.beta_w),
            ("beta_b", self.beta_b),
            ("embed_w", self.embed_w),
            ("embed_b", self.embed_b),
        ]
        for name, arr in fixed:
            yield name, arr
        for i, (w, b) in enumerate(self.head):
            yield f"head_{i}_w", w
            yield f"head_{i}_b", b

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda-out-of-range")
        if len(self.head) < 1:
            raise ValueError("head-depth-invalid: need at least one layer")
        for name, arr in self.named_arrays():
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite-parameter: {name}")

    def as_tensors(self, tape=None) -> "ParamTensors":
        return ParamTensors(self, tape)

    def copy(self) -> "ModelParams":
        import copy as _copy

        return _copy.deepcopy(self)


class ParamTensors:
    """Tensor view of :class:`ModelParams` for one forward/backward pass."""

    def __init__(self, params: ModelParams, tape=None):
        self.meta = params
        self._arrays = dict(params.named_arrays())
        make = tape.leaf if tape is not None else Tensor
        self._tensors = {name: make(arr) for name, arr in self._arrays.items()}
        self.head = [
            (self._tensors[f"head_{i}_w"], self._tensors[f"head_{i}_b"]) for i in range(len(params.head))
        ]

    def __getattr__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise AttributeError(name) from None

    def gradients(self):
        """Yield (name, grad) after a backward pass; missing grads are zero."""
        for name, t in self._tensors.items():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            yield name, g
