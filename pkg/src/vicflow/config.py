"""Run configuration shared by the library pipeline and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

FUSION_MODES = ("modulate", "concat")
PRIOR_MODES = ("cost", "raw_displacement")
LOSS_SIGNS = ("cost_minimizing", "literal")
FLOW_COUNTING = ("coverage", "pair_sum")


@dataclass
class RunConfig:
    """Every switch the pipeline understands, one-to-one with CLI flags.

    The ablation block mirrors the study axes: context enrichment on/off,
    one-to-many vs one-to-one inference, displacement-gated attention,
    the displacement modulator (with its fusion mode), the transport loss,
    prior cost vs raw displacement magnitude, the loss sign, and the flow
    counting rule.
    """

    # pairing and matching
    interval: int = 1  # stride between sampled frames
    eta: int = 5  # group cap: max matches per current-frame pedestrian
    radius: float = 0.2  # normalized grouping distance for supervision

    # model dimensions
    d: int = 64
    patch_shape: tuple[int, int] = (4, 4)
    heads: int = 1
    head_layers: int = 3
    head_hidden: int = 16
    phi_hidden: int = 8

    # losses
    lam: float = 0.1  # displacement share of the mixed transport cost
    sinkhorn_epsilon: float = 0.1
    sinkhorn_max_iter: int = 500
    sinkhorn_tol: float = 1e-6

    # ablation switches
    context: bool = True
    o2m: bool = True
    displacement_attention: bool = True
    modulator: bool = True
    transport_loss_on: bool = True
    fusion: str = "modulate"
    prior: str = "cost"
    loss_sign: str = "cost_minimizing"
    flow_counting: str = "coverage"

    # optimization
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    seed: int = 0

    # paths (CLI surface)
    data_dir: str = ""
    model_path: str = ""
    output_path: str = ""

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda-out-of-range: must lie in [0, 1]")
        if self.head_layers < 1:
            raise ValueError("head-depth-invalid: need at least one layer")
        if self.eta < 1 or self.interval < 1 or self.heads < 1:
            raise ValueError("config-invalid: eta, interval and heads must be positive")
        h, w = self.patch_shape
        if self.d % (h * w) != 0 or self.d % 4 != 0 or self.d % self.heads != 0:
            raise ValueError("dimension-indivisible: d must divide by h*w, 4 and heads")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"config-invalid: fusion must be one of {FUSION_MODES}")
        if self.prior not in PRIOR_MODES:
            raise ValueError(f"config-invalid: prior must be one of {PRIOR_MODES}")
        if self.loss_sign not in LOSS_SIGNS:
            raise ValueError(f"config-invalid: loss_sign must be one of {LOSS_SIGNS}")
        if self.flow_counting not in FLOW_COUNTING:
            raise ValueError(f"config-invalid: flow_counting must be one of {FLOW_COUNTING}")
        if self.sinkhorn_epsilon <= 0 or self.sinkhorn_tol <= 0 or self.sinkhorn_max_iter < 1:
            raise ValueError("config-invalid: bad sinkhorn settings")
        if self.radius < 0:
            raise ValueError("config-invalid: radius must be non-negative")

    @property
    def head_mode(self) -> str:
        return self.fusion if self.modulator else "plain"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, v in data.items():
            if key in names:
                kwargs[key] = tuple(v) if key == "patch_shape" else v
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg
