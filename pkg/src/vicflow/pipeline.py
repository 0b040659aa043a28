"""Frame-pair forward pass and loss assembly.

This is the glue between the context generator, the matcher and the losses:
one function runs a descriptor pair through the configured pipeline, another
turns the result into the training loss (transport + classification).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels as K
from .assignment import TransportPlan
from .attention import IcgOutput, build_prior_field, embed_tokens, icg_forward
from .config import RunConfig
from .core import DescriptorSet, ModelParams, ParamTensors, PriorField
from .kernels import Tensor
from .losses import (
    appearance_cost,
    classification_loss,
    combine_costs,
    displacement_cost,
    select_candidates,
    total_loss,
    transport_loss,
)
from .matcher import pair_probabilities

__all__ = ["PairForward", "PairLoss", "build_params", "matcher_forward", "pair_loss"]


@dataclass
class PairForward:
    probabilities: Tensor  # n x m
    enriched_prev: Tensor  # m x d
    enriched_curr: Tensor  # n x d
    prior: PriorField | None
    icg: IcgOutput | None


@dataclass
class PairLoss:
    loss: Tensor
    transport: float
    classification: float
    plan: TransportPlan | None
    candidates: int


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def build_params(config: RunConfig, rng: np.random.Generator, input_dim: int | None = None) -> ModelParams:
    """Initialize model parameters for the configured pipeline.

    ``input_dim`` is the raw descriptor width fed to the embedding layer
    (defaults to the model width). The head input width follows the fusion
    mode; the modulation scale starts neutral (alpha ~ 1, beta ~ 0).
    """
    config.validate()
    d = config.d
    c = d // (config.patch_shape[0] * config.patch_shape[1])
    d_in = input_dim if input_dim is not None else d

    head_in = {"plain": d, "modulate": c, "concat": d + c}[config.head_mode]
    widths = [head_in] + [config.head_hidden] * (config.head_layers - 1) + [1]
    head = []
    for i in range(config.head_layers):
        head.append((_glorot(rng, widths[i], widths[i + 1]), np.zeros(widths[i + 1])))
    # conservative start: with matches initially sparse, the assignment-based
    # candidate selection keeps proposing informative negatives
    head[-1][1][:] = -2.0

    return ModelParams(
        d=d,
        patch_shape=config.patch_shape,
        heads=config.heads,
        head_mode=config.head_mode,
        phi_activation="tanh",
        lam=config.lam,
        w_q=0.5 * _glorot(rng, d, d),
        w_k=0.5 * _glorot(rng, d, d),
        w_v=_glorot(rng, d, d),
        theta_raw=np.asarray(0.0),  # theta starts at 0.5
        phi_w1=1.5 * rng.normal(size=(2, config.phi_hidden)),
        phi_w2=_glorot(rng, config.phi_hidden, c),
        g_w=_glorot(rng, d + 1, d),
        g_b=np.zeros(d),
        delta_w=_glorot(rng, d, c),
        delta_b=np.zeros(c),
        conv_w=_glorot(rng, c, c),
        conv_b=np.zeros(c),
        alpha_w=0.1 * _glorot(rng, c, c),
        alpha_b=np.ones(c),
        beta_w=_glorot(rng, c, c),
        beta_b=np.zeros(c),
        head=head,
        embed_w=_glorot(rng, d_in, d),
        embed_b=np.zeros(d),
    )


def _needs_prior(config: RunConfig) -> bool:
    return config.displacement_attention or config.modulator or config.transport_loss_on


def _similarity_probabilities(f_prev: Tensor, f_curr: Tensor) -> Tensor:
    n, m = f_curr.shape[0], f_prev.shape[0]
    if n == 0 or m == 0:
        return Tensor(np.zeros((n, m)))
    norm_p = K.sqrt(K.sum_axis(K.mul(f_prev, f_prev), 1))
    norm_c = K.sqrt(K.sum_axis(K.mul(f_curr, f_curr), 1))
    sim = K.div(
        K.matmul(f_curr, K.transpose(f_prev)),
        K.mul(K.reshape(norm_c, (n, 1)), K.reshape(norm_p, (1, m))),
    )
    return K.clamp(K.mul(K.add(sim, 1.0), 0.5), 0.0, 1.0)


def matcher_forward(
    prev: DescriptorSet,
    curr: DescriptorSet,
    pt: ParamTensors,
    config: RunConfig,
) -> PairForward:
    """Run one frame pair through embedding, context generation and matching."""
    m, n = prev.count, curr.count

    prior = None
    if _needs_prior(config):
        prior = build_prior_field(prev.positions, curr.positions, pt, mode=config.prior)

    if config.context:
        icg = icg_forward(prev, curr, prior if config.displacement_attention else None, pt, heads=config.heads)
        enriched_prev, enriched_curr = icg.enriched_split()
    else:
        icg = None
        enriched_prev = embed_tokens(prev, pt)
        enriched_curr = embed_tokens(curr, pt)

    if config.o2m:
        embedding = prior.embedding if (prior is not None and config.modulator) else None
        probabilities = pair_probabilities(enriched_prev, enriched_curr, embedding, pt, mode=config.head_mode)
    else:
        # one-to-one baseline: feature cosine similarity stands in for the
        # head, matched by Hungarian assignment at the same 0.5 threshold
        probabilities = _similarity_probabilities(enriched_prev, enriched_curr)

    return PairForward(
        probabilities=probabilities,
        enriched_prev=enriched_prev,
        enriched_curr=enriched_curr,
        prior=prior,
        icg=icg,
    )


def pair_loss(prev: DescriptorSet, curr: DescriptorSet, pt: ParamTensors, config: RunConfig) -> PairLoss:
    """Total training loss for one frame pair.

    Classification supervises the matcher head on geometry-selected
    candidates; the transport loss (when enabled) shapes both the learned
    prior cost and the enriched appearance features.
    """
    fw = matcher_forward(prev, curr, pt, config)
    n, m = curr.count, prev.count

    candidates = select_candidates(prev.positions, curr.positions, fw.probabilities.data, config.radius)
    cls = classification_loss(fw.probabilities, candidates)

    plan = None
    dot = Tensor(np.asarray(0.0))
    if config.transport_loss_on and n > 0 and m > 0:
        c_disp = displacement_cost(fw.prior.prior_cost)
        c_appear = appearance_cost(fw.enriched_prev, fw.enriched_curr)
        pair = combine_costs(c_disp, c_appear, pt.meta.lam)
        dot, plan = transport_loss(
            pair,
            epsilon=config.sinkhorn_epsilon,
            max_iter=config.sinkhorn_max_iter,
            tol=config.sinkhorn_tol,
            sign=config.loss_sign,
        )

    loss = total_loss(dot, cls)
    return PairLoss(
        loss=loss,
        transport=float(dot.data),
        classification=float(cls.data),
        plan=plan,
        candidates=len(candidates),
    )
