"""Cross-frame context generation.

Tokens from two frames are concatenated and passed through self-attention;
the attention map is split into four quadrants whose cross blocks measure
cross-frame affinity. Averaging each cross block along the other-frame axis
yields one group-context scalar per token, which is concatenated back onto
the attention output and projected by a residual feed-forward layer.

When a displacement prior is supplied, the post-softmax attention weights
are multiplied elementwise by theta**Gamma (an exponential decay in the
learned pairwise displacement cost) before the value mix. Rows are
deliberately not renormalized after this gating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .core import AttentionQuadrants, DescriptorSet, ParamTensors, PriorField
from .kernels import Tensor

__all__ = [
    "IcgOutput",
    "concat_frames",
    "embed_tokens",
    "self_attention",
    "split_quadrants",
    "group_context_scalars",
    "build_prior_field",
    "icg_forward",
]


@dataclass(frozen=True)
class IcgOutput:
    """Context-enriched tokens plus the attention views they came from.

    ``quadrants`` always holds the pre-modulation softmax map (its rows sum
    to one); ``modulated_map`` is present only when the displacement gate was
    active. Rows 0..m of ``enriched`` are previous-frame tokens, the rest
    current-frame tokens, and ``context_scalars`` follows the same order.
    """

    enriched: Tensor  # (m+n) x d
    quadrants: AttentionQuadrants
    context_scalars: Tensor  # (m+n,)
    attention_map: np.ndarray  # (m+n) x (m+n), pre-modulation
    modulated_map: np.ndarray | None
    m: int
    n: int

    def enriched_split(self) -> tuple[Tensor, Tensor]:
        prev = K.slice_axis(self.enriched, 0, 0, self.m)
        curr = K.slice_axis(self.enriched, 0, self.m, self.m + self.n)
        return prev, curr


def concat_frames(prev: DescriptorSet, curr: DescriptorSet) -> Tensor:
    """Stack previous-frame rows above current-frame rows."""
    if prev.d != curr.d or prev.patch_shape != curr.patch_shape:
        raise ValueError(
            f"dimension-mismatch: d/patch {prev.d}/{prev.patch_shape} vs {curr.d}/{curr.patch_shape}"
        )
    return K.concat([Tensor(prev.features), Tensor(curr.features)], axis=0)


def embed_tokens(dset: DescriptorSet, pt: ParamTensors) -> Tensor:
    """Project raw descriptors to model width and add the position embedding.

    The raw sinusoidal embedding has norm ~sqrt(d/2); it is rescaled to
    roughly unit norm so appearance and geometry start balanced in the token.
    """
    d = pt.meta.d
    proj = K.add(K.matmul(Tensor(dset.features), pt.embed_w), pt.embed_b)
    pos = K.position_embed(dset.positions, d) * np.sqrt(2.0 / d)
    return K.add(proj, Tensor(pos))


def _attention(
    tokens: Tensor,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    heads: int,
    gate: Tensor | None,
) -> tuple[Tensor, Tensor, Tensor | None]:
    """Multi-head self-attention returning (output, avg map, avg gated map).

    ``gate`` is an elementwise multiplier applied to each head's post-softmax
    map before the value mix. The averaged pre-gate map is what quadrant
    semantics are defined on (heads are averaged before splitting).
    """
    d = tokens.shape[1]
    if heads < 1 or d % heads != 0:
        raise ValueError(f"dimension-indivisible: {heads} heads for width {d}")
    dh = d // heads
    q = K.matmul(tokens, w_q)
    k = K.matmul(tokens, w_k)
    v = K.matmul(tokens, w_v)
    maps = []
    outs = []
    gated_maps = []
    for h in range(heads):
        qh = K.slice_axis(q, 1, h * dh, (h + 1) * dh) if heads > 1 else q
        kh = K.slice_axis(k, 1, h * dh, (h + 1) * dh) if heads > 1 else k
        vh = K.slice_axis(v, 1, h * dh, (h + 1) * dh) if heads > 1 else v
        logits = K.mul(K.matmul(qh, K.transpose(kh)), 1.0 / np.sqrt(dh))
        amap = K.softmax_rows(logits)
        maps.append(amap)
        mixed = amap if gate is None else K.mul(amap, gate)
        if gate is not None:
            gated_maps.append(mixed)
        outs.append(K.matmul(mixed, vh))
    out = outs[0] if heads == 1 else K.concat(outs, axis=1)
    avg_map = maps[0]
    for extra in maps[1:]:
        avg_map = K.add(avg_map, extra)
    if heads > 1:
        avg_map = K.mul(avg_map, 1.0 / heads)
    avg_gated = None
    if gate is not None:
        avg_gated = gated_maps[0]
        for extra in gated_maps[1:]:
            avg_gated = K.add(avg_gated, extra)
        if heads > 1:
            avg_gated = K.mul(avg_gated, 1.0 / heads)
    return out, avg_map, avg_gated


def self_attention(tokens, w_q, w_k, w_v, heads: int = 1) -> tuple[Tensor, Tensor]:
    """Plain softmax self-attention: output and the (head-averaged) map."""
    out, amap, _ = _attention(K.as_tensor(tokens), K.as_tensor(w_q), K.as_tensor(w_k), K.as_tensor(w_v), heads, None)
    return out, amap


def split_quadrants(attention_map, m: int, n: int) -> AttentionQuadrants:
    a = np.asarray(attention_map, dtype=np.float64)
    if a.shape != (m + n, m + n):
        raise ValueError(f"size-mismatch: map {a.shape} for m={m}, n={n}")
    return AttentionQuadrants(
        prev=a[:m, :m].copy(),
        cls=a[:m, m:].copy(),
        match=a[m:, :m].copy(),
        curr=a[m:, m:].copy(),
    )


def group_context_scalars(q: AttentionQuadrants) -> np.ndarray:
    """One group-context scalar per token, previous-frame tokens first.

    A previous-frame token's scalar is the mean of its row of the cls block
    (its affinity spread over the current frame); a current-frame token's is
    the mean of its row of the match block. An empty other frame yields 0.
    """
    m, n = q.m, q.n
    prev_part = q.cls.mean(axis=1) if n > 0 else np.zeros(m)
    curr_part = q.match.mean(axis=1) if m > 0 else np.zeros(n)
    return np.concatenate([prev_part, curr_part])


def _context_scalars_taped(avg_map: Tensor, m: int, n: int) -> Tensor:
    parts = []
    if m > 0:
        cls = K.slice_axis(K.slice_axis(avg_map, 0, 0, m), 1, m, m + n)
        parts.append(K.mean_axis(cls, 1) if n > 0 else Tensor(np.zeros(m)))
    if n > 0:
        match = K.slice_axis(K.slice_axis(avg_map, 0, m, m + n), 1, 0, m)
        parts.append(K.mean_axis(match, 1) if m > 0 else Tensor(np.zeros(n)))
    if not parts:
        return Tensor(np.zeros(0))
    return parts[0] if len(parts) == 1 else K.concat(parts, axis=0)


def _phi(deltas: Tensor, pt: ParamTensors) -> Tensor:
    """Bias-free two-layer projection of displacement vectors to channels."""
    hidden = K.matmul(deltas, pt.phi_w1)
    act = pt.meta.phi_activation
    if act == "tanh":
        hidden = K.tanh(hidden)
    elif act == "relu":
        hidden = K.relu(hidden)
    elif act != "identity":
        raise ValueError(f"unknown-activation: {act}")
    return K.matmul(hidden, pt.phi_w2)


def _channel_norm(emb: Tensor) -> Tensor:
    return K.sqrt(K.sum_axis(K.mul(emb, emb), axis=-1))


def build_prior_field(prev_pos, curr_pos, pt: ParamTensors, mode: str = "cost") -> PriorField:
    """Displacement tensor, its embedding, and the pairwise prior costs.

    ``mode='cost'`` uses the channel norm of the learned embedding as the
    cost (the default); ``mode='raw_displacement'`` falls back to the plain
    Euclidean displacement magnitude, bypassing the learned projection.
    The full-cost matrix extends the same pipeline to every token pair,
    including within-frame pairs, in concatenated token order.
    """
    prev_pos = np.asarray(prev_pos, dtype=np.float64).reshape(-1, 2)
    curr_pos = np.asarray(curr_pos, dtype=np.float64).reshape(-1, 2)
    m, n = prev_pos.shape[0], curr_pos.shape[0]
    c = pt.meta.channels

    disp = curr_pos[:, None, :] - prev_pos[None, :, :]  # n x m x 2
    emb_flat = _phi(Tensor(disp.reshape(n * m, 2)), pt)
    embedding = K.reshape(emb_flat, (n, m, c))

    all_pos = np.concatenate([prev_pos, curr_pos], axis=0)
    t = m + n
    full_disp = all_pos[:, None, :] - all_pos[None, :, :]  # t x t x 2

    if mode == "cost":
        prior_cost = _channel_norm(embedding)
        full_emb = _phi(Tensor(full_disp.reshape(t * t, 2)), pt)
        full_cost = K.reshape(_channel_norm(full_emb), (t, t))
    elif mode == "raw_displacement":
        prior_cost = Tensor(np.linalg.norm(disp, axis=-1))
        full_cost = Tensor(np.linalg.norm(full_disp, axis=-1))
    else:
        raise ValueError(f"unknown-prior-mode: {mode}")

    return PriorField(displacement=disp, embedding=embedding, prior_cost=prior_cost, full_cost=full_cost)


def icg_forward(
    prev: DescriptorSet,
    curr: DescriptorSet,
    prior: PriorField | None,
    pt: ParamTensors,
    heads: int = 1,
    theta_override: float | None = None,
) -> IcgOutput:
    """Run context generation over a frame pair.

    The displacement gate is active iff ``prior`` is given: the full-cost
    matrix Gamma modulates each head's post-softmax map by theta**Gamma.
    ``theta_override`` substitutes a fixed decay base for sigmoid(theta_raw),
    which the reduction tests use to pin theta = 1 exactly.
    """
    if prev.d != curr.d or prev.patch_shape != curr.patch_shape:
        raise ValueError("dimension-mismatch: frame descriptor layouts differ")
    m, n = prev.count, curr.count
    tokens = K.concat([embed_tokens(prev, pt), embed_tokens(curr, pt)], axis=0)

    gate = None
    if prior is not None:
        if prior.full_cost.shape != (m + n, m + n):
            raise ValueError("shape-mismatch: prior full_cost does not cover tokens")
        theta = Tensor(np.asarray(theta_override)) if theta_override is not None else K.sigmoid(pt.theta_raw)
        gate = K.exp(K.mul(prior.full_cost, K.log(theta)))  # theta ** Gamma

    attn_out, avg_map, avg_gated = _attention(tokens, pt.w_q, pt.w_k, pt.w_v, heads, gate)

    scalars = _context_scalars_taped(avg_map, m, n)
    ff_in = K.concat([attn_out, K.reshape(scalars, (m + n, 1))], axis=1)
    enriched = K.add(attn_out, K.add(K.matmul(ff_in, pt.g_w), pt.g_b))

    return IcgOutput(
        enriched=enriched,
        quadrants=split_quadrants(avg_map.data, m, n),
        context_scalars=scalars,
        attention_map=avg_map.data.copy(),
        modulated_map=None if avg_gated is None else avg_gated.data.copy(),
        m=m,
        n=n,
    )
