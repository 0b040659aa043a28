"""Gradient verification battery.

Four loss-path checks (transport cost, candidate cross entropy, the
coarse-to-fine modulator, and the full context generator) plus the
elementary kernels, all against central finite differences. Instances are
rejection-sampled away from ReLU kinks, near-degenerate layer-norm rows and
coincident points, where the analytic/numeric comparison is ill-posed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import kernels as K
from .assignment import sinkhorn
from .attention import build_prior_field, icg_forward
from .config import RunConfig
from .core import DescriptorSet
from .kernels import GradCheckReport, Tensor, check_gradient
from .losses import appearance_cost, classification_loss, combine_costs, displacement_cost, select_candidates
from .matcher import match_probability, modulate, pair_similarity
from .pipeline import build_params

__all__ = ["SuiteResult", "kernel_suite", "path_suite", "run_full_suite"]

KERNEL_TOL = 1e-6
PATH_TOL = 1e-5


@dataclass
class SuiteResult:
    name: str
    reports: list = field(default_factory=list)  # (label, GradCheckReport)

    @property
    def passed(self) -> bool:
        return all(r.passed for _, r in self.reports)

    @property
    def worst(self) -> float:
        return max((r.max_rel_error for _, r in self.reports), default=0.0)

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"{self.name}: {state} (worst rel err {self.worst:.3e}, {len(self.reports)} checks)"


def _rand(rng, *shape, scale=1.0, away_from_zero=0.0):
    x = scale * rng.normal(size=shape)
    if away_from_zero > 0.0:
        x = np.where(np.abs(x) < away_from_zero, x + np.sign(x + 1e-12) * away_from_zero, x)
    return x


def kernel_suite(trials: int = 100, seed: int = 0) -> SuiteResult:
    """Every elementary kernel against finite differences at 1e-6."""
    rng = np.random.default_rng(seed)
    result = SuiteResult("kernels")

    def check(label, f, x, tol=KERNEL_TOL):
        result.reports.append((label, check_gradient(f, x, tol=tol)))

    for _ in range(trials):
        r, c = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        a = _rand(rng, r, c)
        b = _rand(rng, c, r)
        w = _rand(rng, r, c)
        w_sq = _rand(rng, r, r)
        check("matmul", lambda x: K.sum_all(K.mul(K.matmul(x, Tensor(b)), Tensor(w_sq))), a)
        check("add", lambda x: K.sum_all(K.mul(K.add(x, Tensor(b.T)), Tensor(w))), a)
        check("sub", lambda x: K.sum_all(K.mul(K.sub(x, Tensor(b.T)), Tensor(w))), a)
        check("hadamard", lambda x: K.sum_all(K.mul(K.mul(x, Tensor(b.T)), Tensor(w))), a)
        div_by = _rand(rng, r, c, away_from_zero=0.5)
        check("div", lambda x: K.sum_all(K.mul(K.div(x, Tensor(div_by)), Tensor(w))), a)
        check("div-denom", lambda x: K.sum_all(K.mul(K.div(Tensor(a), x), Tensor(w))), div_by)
        check("relu", lambda x: K.sum_all(K.mul(K.relu(x), Tensor(w))), _rand(rng, r, c, away_from_zero=1e-2))
        check("sigmoid", lambda x: K.sum_all(K.mul(K.sigmoid(x), Tensor(w))), a)
        check("tanh", lambda x: K.sum_all(K.mul(K.tanh(x), Tensor(w))), a)
        check("exp", lambda x: K.sum_all(K.mul(K.exp(x), Tensor(w))), a)
        check("log", lambda x: K.sum_all(K.mul(K.log(x), Tensor(w))), np.abs(a) + 0.5)
        check("sqrt", lambda x: K.sum_all(K.mul(K.sqrt(x), Tensor(w))), np.abs(a) + 0.5)
        check("softmax_rows", lambda x: K.sum_all(K.mul(K.softmax_rows(x), Tensor(w))), a)
        ln_x = a.copy()
        while (ln_x.std(axis=-1) < 0.3).any():
            ln_x = _rand(rng, r, c)
        check("layer_norm", lambda x: K.sum_all(K.mul(K.layer_norm(x), Tensor(w))), ln_x)
        check("mean_axis", lambda x: K.sum_all(K.mul(K.mean_axis(x, 1, keepdims=True), Tensor(w[:, :1]))), a)
        check("sum_axis", lambda x: K.sum_all(K.mul(K.sum_axis(x, 0), Tensor(w[0]))), a)
        check("concat", lambda x: K.sum_all(K.mul(K.concat([x, Tensor(b.T)], axis=0), Tensor(np.vstack([w, w])))), a)
        check("reshape", lambda x: K.sum_all(K.mul(K.reshape(x, (c, r)), Tensor(w.T))), a)
        check("transpose", lambda x: K.sum_all(K.mul(K.transpose(x), Tensor(w.T))), a)
        check("slice", lambda x: K.sum_all(K.mul(K.slice_axis(x, 1, 0, c - 1), Tensor(w[:, : c - 1]))), a)
        gp_rows = rng.integers(0, r, size=3)
        gp_cols = rng.integers(0, c, size=3)
        check("gather", lambda x: K.sum_all(K.gather_pairs(x, gp_rows, gp_cols)), a)
        check("gap", lambda x: K.sum_all(K.global_avg_pool(K.reshape(x, (r, c, 1)))), a)
        clamp_x = _rand(rng, r, c)
        clamp_x = np.where(np.abs(np.abs(clamp_x) - 1.0) < 1e-2, clamp_x * 1.2, clamp_x)
        check("clamp", lambda x: K.sum_all(K.mul(K.clamp(x, -1.0, 1.0), Tensor(w))), clamp_x)
    return result


def _spread_positions(rng, count: int) -> np.ndarray:
    # resample until pairwise distinct; coincident points put a norm at zero
    while True:
        pos = rng.uniform(0.0, 1.0, size=(count, 2))
        if count < 2:
            return pos
        d = np.linalg.norm(pos[:, None] - pos[None, :], axis=-1)
        if (d + np.eye(count)).min() > 1e-2:
            return pos


def _toy_setup(rng):
    config = RunConfig(d=16, patch_shape=(2, 2), head_layers=3, head_hidden=8, phi_hidden=6)
    params = build_params(config, rng, input_dim=16)
    return config, params


def _transport_check(rng) -> GradCheckReport:
    """Gradient of <C, plan> with the plan frozen, w.r.t. enriched features."""
    _, params = _toy_setup(rng)
    m, n = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    feats = _rand(rng, m + n, 16)
    prev_pos = _spread_positions(rng, m)
    curr_pos = _spread_positions(rng, n)

    def combined_of(x: Tensor) -> Tensor:
        pt = params.as_tensors()
        prior = build_prior_field(prev_pos, curr_pos, pt, mode="cost")
        f_prev = K.slice_axis(x, 0, 0, m)
        f_curr = K.slice_axis(x, 0, m, m + n)
        cd = displacement_cost(prior.prior_cost)
        ca = appearance_cost(f_prev, f_curr)
        return combine_costs(cd, ca, 0.4).combined

    plan0 = sinkhorn(combined_of(Tensor(feats)).data).plan

    def f(x: Tensor):
        return K.sum_all(K.mul(combined_of(x), Tensor(plan0)))

    return check_gradient(f, feats, tol=PATH_TOL)


def _classification_check(rng) -> GradCheckReport:
    """Candidate cross entropy w.r.t. the probability matrix, at 1e-6."""
    n, m = int(rng.integers(2, 7)), int(rng.integers(2, 7))
    probs = rng.uniform(0.05, 0.95, size=(n, m))
    prev_pos = _spread_positions(rng, m)
    curr_pos = _spread_positions(rng, n)
    cands = select_candidates(prev_pos, curr_pos, probs, radius=0.3)
    if len(cands) == 0:
        cands = select_candidates(prev_pos, curr_pos, probs, radius=1.5)

    def f(x: Tensor):
        return classification_loss(x, cands)

    return check_gradient(f, probs, tol=1e-6)


def _modulator_safe(packed: np.ndarray, params, margin: float = 1e-3) -> bool:
    """Reject instances whose ReLU pre-activations sit near a kink."""
    d = 16
    s = packed[:d] * packed[d : 2 * d]
    if np.abs(s).std() < 0.1:
        return False
    conv_in = s.reshape(4, 4) @ params.conv_w + params.conv_b
    if np.abs(conv_in).min() < margin:
        return False
    prior_vec = packed[2 * d :]
    coarse_in = s @ params.delta_w + params.delta_b
    if coarse_in.std() < 0.1:
        return False
    scale = prior_vec @ params.alpha_w + params.alpha_b
    shift = prior_vec @ params.beta_w + params.beta_b
    fine = scale * np.maximum(conv_in, 0.0) + shift
    mu = coarse_in.mean()
    var = ((coarse_in - mu) ** 2).mean()
    fused = (coarse_in - mu) / np.sqrt(var + 1e-8) + fine.mean(axis=0)
    x = fused[None, :]
    for i, (w, b) in enumerate(params.head):
        x = x @ w + b
        if i + 1 < len(params.head):
            if np.abs(x).min() < margin:
                return False
            x = np.maximum(x, 0.0)
    return True


def _modulator_check(rng) -> GradCheckReport:
    """Pair feature -> modulator -> head probability, w.r.t. the pair inputs."""
    _, params = _toy_setup(rng)
    d = 16
    while True:
        packed = np.concatenate([_rand(rng, d), _rand(rng, d), _rand(rng, 4, scale=0.5)])
        if _modulator_safe(packed, params):
            break

    def f(x: Tensor):
        pt = params.as_tensors()
        fp = K.slice_axis(x, 0, 0, d)
        fc = K.slice_axis(x, 0, d, 2 * d)
        pv = K.slice_axis(x, 0, 2 * d, 2 * d + 4)
        sim = pair_similarity(fp, fc, (2, 2))
        feat = modulate(sim, pv, pt)
        return match_probability(feat, pt)

    return check_gradient(f, packed, tol=PATH_TOL)


def _context_check(rng) -> GradCheckReport:
    """Scalar readout of the gated context generator w.r.t. raw descriptors."""
    _, params = _toy_setup(rng)
    m, n = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    prev_pos = _spread_positions(rng, m)
    curr_pos = _spread_positions(rng, n)
    feats = _rand(rng, m + n, 16)
    readout = _rand(rng, m + n, 16)

    def f(x: Tensor):
        pt = params.as_tensors()
        prior = A.build_prior_field(prev_pos, curr_pos, pt, mode="cost")
        emb_prev = K.add(
            K.add(K.matmul(K.slice_axis(x, 0, 0, m), pt.embed_w), pt.embed_b),
            Tensor(K.position_embed(prev_pos, 16)),
        )
        emb_curr = K.add(
            K.add(K.matmul(K.slice_axis(x, 0, m, m + n), pt.embed_w), pt.embed_b),
            Tensor(K.position_embed(curr_pos, 16)),
        )
        tokens = K.concat([emb_prev, emb_curr], axis=0)
        theta = K.sigmoid(pt.theta_raw)
        gate = K.exp(K.mul(prior.full_cost, K.log(theta)))
        attn_out, avg_map, _ = A._attention(tokens, pt.w_q, pt.w_k, pt.w_v, 1, gate)
        scalars = A._context_scalars_taped(avg_map, m, n)
        ff_in = K.concat([attn_out, K.reshape(scalars, (m + n, 1))], axis=1)
        enriched = K.add(attn_out, K.add(K.matmul(ff_in, pt.g_w), pt.g_b))
        return K.sum_all(K.mul(enriched, Tensor(readout)))

    return check_gradient(f, feats, tol=PATH_TOL)


def _param_check(rng, which: str) -> GradCheckReport:
    """Transport-path gradient w.r.t. one parameter tensor (sampled coords)."""
    _, params = _toy_setup(rng)
    m, n = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    prev = DescriptorSet(features=_rand(rng, m, 16), positions=_spread_positions(rng, m), patch_shape=(2, 2))
    curr = DescriptorSet(features=_rand(rng, n, 16), positions=_spread_positions(rng, n), patch_shape=(2, 2))
    base = dict(params.named_arrays())[which]
    base_flat = base.copy().reshape(-1)

    def combined_of(x: Tensor) -> Tensor:
        pt = params.as_tensors()
        pt._tensors[which] = K.reshape(x, base.shape)
        prior = build_prior_field(prev.positions, curr.positions, pt, mode="cost")
        out = icg_forward(prev, curr, prior, pt)
        f_prev, f_curr = out.enriched_split()
        cd = displacement_cost(prior.prior_cost)
        ca = appearance_cost(f_prev, f_curr)
        return combine_costs(cd, ca, 0.4).combined

    plan0 = sinkhorn(combined_of(Tensor(base_flat)).data).plan

    def f(x: Tensor):
        return K.sum_all(K.mul(combined_of(x), Tensor(plan0)))

    return check_gradient(f, base_flat, tol=PATH_TOL, max_coords=12, rng=rng)


def path_suite(trials: int = 100, seed: int = 0) -> list[SuiteResult]:
    """The four loss-path gradient batteries (cross entropy pinned at 1e-6)."""
    results = []
    for name, checker in (
        ("transport-cost", _transport_check),
        ("classification", _classification_check),
        ("modulator", _modulator_check),
        ("context-generator", _context_check),
    ):
        rng = np.random.default_rng(seed)
        suite = SuiteResult(name)
        for t in range(trials):
            suite.reports.append((f"{name}[{t}]", checker(rng)))
        results.append(suite)
    param_rng = np.random.default_rng(seed + 1)
    suite = SuiteResult("parameter-tensors")
    for which in ("w_q", "w_k", "w_v", "theta_raw", "phi_w1", "phi_w2", "g_w", "g_b", "embed_w", "embed_b"):
        suite.reports.append((which, _param_check(param_rng, which)))
    results.append(suite)
    return results


def run_full_suite(trials: int = 100, kernel_trials: int = 100, seed: int = 0) -> list[SuiteResult]:
    return [kernel_suite(kernel_trials, seed)] + path_suite(trials, seed)
