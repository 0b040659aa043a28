"""Pedestrian flux estimation from point-annotated video.

A video's unique-pedestrian count is its first-frame count plus the inflow
of every sampled frame pair. Frame pairs are matched one-to-many: a
cross-frame attention block supplies group context, a displacement prior
(learned embedding of pairwise motion) gates attention, modulates pair
features and shapes an optimal-transport training loss, and flows are
derived from match coverage.
"""

from .assignment import TransportPlan, hungarian, sinkhorn
from .attention import (
    IcgOutput,
    build_prior_field,
    concat_frames,
    group_context_scalars,
    icg_forward,
    self_attention,
    split_quadrants,
)
from .config import RunConfig
from .core import (
    AttentionQuadrants,
    DescriptorSet,
    FramePoints,
    MatchResult,
    ModelParams,
    PriorField,
    SequenceResult,
    validate,
)
from .flux import VideoEval, accumulate, metrics, run_sequence, truth_total
from .kernels import GradTape, Tensor, check_gradient, position_embed
from .losses import (
    CandidateSet,
    CostPair,
    appearance_cost,
    classification_loss,
    combine_costs,
    displacement_cost,
    select_candidates,
    total_loss,
    transport_loss,
)
from .matcher import (
    ModulatedFeature,
    PairSimilarity,
    derive_flows,
    derive_flows_o2o,
    match_probability,
    modulate,
    pair_probabilities,
    pair_similarity,
)
from .pipeline import build_params, matcher_forward, pair_loss
from .simulator import SimConfig, SimSequence, generate, oracle_probabilities
from .training import collect_pairs, fit

__version__ = "0.1.0"
