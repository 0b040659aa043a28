import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicflow import kernels as K
from vicflow.attention import (
    build_prior_field,
    concat_frames,
    group_context_scalars,
    icg_forward,
    self_attention,
    split_quadrants,
)
from vicflow.config import RunConfig
from vicflow.core import DescriptorSet
from vicflow.kernels import Tensor
from vicflow.pipeline import build_params


def dset(features, positions, patch=(2, 2)):
    return DescriptorSet(features=np.asarray(features, float), positions=np.asarray(positions, float), patch_shape=patch)


def toy_params(seed=0, phi_activation=None):
    config = RunConfig(d=16, patch_shape=(2, 2), head_hidden=8, phi_hidden=6)
    params = build_params(config, np.random.default_rng(seed), input_dim=16)
    if phi_activation:
        params.phi_activation = phi_activation
    return params


def copy_phi(params):
    """Norm-preserving test projection: copy (dx, dy) into 2 channels, zero-pad."""
    params.phi_activation = "identity"
    params.phi_w1 = np.zeros((2, params.phi_w1.shape[1]))
    params.phi_w1[0, 0] = 1.0
    params.phi_w1[1, 1] = 1.0
    w2 = np.zeros((params.phi_w1.shape[1], params.channels))
    w2[0, 0] = 1.0
    w2[1, 1] = 1.0
    params.phi_w2 = w2
    return params


# ---------------------------------------------------------------------------
# concat / split / scalars


def test_concat_frames_order():
    prev = dset(np.arange(8.0).reshape(2, 4), np.zeros((2, 2)), patch=(1, 2))
    curr = dset(np.arange(12.0).reshape(3, 4) + 100, np.zeros((3, 2)), patch=(1, 2))
    out = concat_frames(prev, curr)
    assert out.shape == (5, 4)
    assert np.array_equal(out.data[:2], prev.features)
    assert np.array_equal(out.data[2:], curr.features)


def test_concat_frames_empty_current():
    prev = dset(np.ones((2, 4)), np.zeros((2, 2)), patch=(1, 2))
    curr = dset(np.zeros((0, 4)), np.zeros((0, 2)), patch=(1, 2))
    assert concat_frames(prev, curr).shape == (2, 4)


def test_concat_frames_dimension_mismatch():
    prev = dset(np.ones((2, 4)), np.zeros((2, 2)), patch=(1, 2))
    curr = dset(np.ones((2, 8)), np.zeros((2, 2)), patch=(2, 2))
    with pytest.raises(ValueError, match="dimension-mismatch"):
        concat_frames(prev, curr)


def test_self_attention_uniform_with_zero_weights():
    tokens = np.random.default_rng(0).normal(size=(5, 8))
    zeros = np.zeros((8, 8))
    out, amap = self_attention(tokens, zeros, zeros, np.eye(8))
    assert np.abs(amap.data - 0.2).max() < 1e-12
    assert np.abs(amap.data.sum(axis=1) - 1.0).max() < 1e-9


def test_self_attention_two_token_concentration():
    # closed form: logits c^2 <x_i, x_j> / sqrt(2) for W_Q = W_K = c I
    c = 3.0
    tokens = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, amap = self_attention(tokens, c * np.eye(2), c * np.eye(2), np.eye(2))
    z = c * c / math.sqrt(2.0)
    expected_self = math.exp(z) / (math.exp(z) + 1.0)
    assert amap.data[0, 0] == pytest.approx(expected_self, rel=1e-12)
    assert amap.data[1, 1] == pytest.approx(expected_self, rel=1e-12)


def test_split_quadrants_index_blocks():
    m, n = 2, 3
    size = m + n
    mat = np.arange(size * size, dtype=float).reshape(size, size)
    mat = mat / mat.sum(axis=1, keepdims=True)
    q = split_quadrants(mat, m, n)
    assert np.array_equal(q.prev, mat[:2, :2])
    assert np.array_equal(q.cls, mat[:2, 2:])
    assert np.array_equal(q.match, mat[2:, :2])
    assert np.array_equal(q.curr, mat[2:, 2:])
    assert np.array_equal(q.reassemble(), mat)


def test_split_quadrants_empty_prev():
    mat = np.full((3, 3), 1.0 / 3.0)
    q = split_quadrants(mat, 0, 3)
    assert q.prev.shape == (0, 0) and q.cls.shape == (0, 3)
    assert np.array_equal(q.curr, mat)


def test_split_quadrants_size_mismatch():
    with pytest.raises(ValueError, match="size-mismatch"):
        split_quadrants(np.eye(4), 2, 3)


@given(st.integers(0, 5), st.integers(0, 5))
@settings(max_examples=40, deadline=None)
def test_split_reassemble_roundtrip(m, n):
    size = m + n
    if size == 0:
        return
    rng = np.random.default_rng(m * 17 + n)
    mat = rng.uniform(0.1, 1.0, size=(size, size))
    mat = mat / mat.sum(axis=1, keepdims=True)
    q = split_quadrants(mat, m, n)
    assert np.array_equal(q.reassemble(), mat)


def test_context_scalars_arithmetic():
    q = split_quadrants(
        np.array(
            [
                [0.5, 0.1, 0.2, 0.2],
                [0.3, 0.3, 0.2, 0.2],
                [0.2, 0.4, 0.2, 0.2],
                [0.25, 0.25, 0.25, 0.25],
            ]
        ),
        2,
        2,
    )
    scalars = group_context_scalars(q)
    # previous tokens first: means of cls rows, then means of match rows
    assert scalars == pytest.approx([0.2, 0.2, 0.3, 0.25])


def test_context_scalars_match_spec_example():
    # match block [[0.2, 0.4]] (n=1, m=2) averages to 0.3
    mat = np.array([[0.3, 0.3, 0.4], [0.2, 0.4, 0.4], [0.2, 0.4, 0.4]])
    q = split_quadrants(mat, 2, 1)
    scalars = group_context_scalars(q)
    assert scalars[2] == pytest.approx(0.3)


def test_context_scalars_empty_other_frame():
    mat = np.full((3, 3), 1.0 / 3.0)
    q = split_quadrants(mat, 0, 3)
    assert np.array_equal(group_context_scalars(q), np.zeros(3))


# ---------------------------------------------------------------------------
# prior field


def test_prior_field_three_four_five():
    params = copy_phi(toy_params())
    pt = params.as_tensors()
    prior = build_prior_field([(0.1, 0.2)], [(0.4, 0.6)], pt)
    assert prior.displacement.shape == (1, 1, 2)
    assert np.allclose(prior.displacement[0, 0], [0.3, 0.4])
    assert prior.prior_cost.data[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_prior_field_identical_points():
    params = copy_phi(toy_params())
    prior = build_prior_field([(0.5, 0.5)], [(0.5, 0.5)], params.as_tensors())
    assert np.allclose(prior.displacement[0, 0], [0.0, 0.0])
    assert prior.prior_cost.data[0, 0] == 0.0


def test_prior_field_shapes():
    params = toy_params()
    rng = np.random.default_rng(1)
    prior = build_prior_field(rng.uniform(0, 1, (2, 2)), rng.uniform(0, 1, (3, 2)), params.as_tensors())
    assert prior.displacement.shape == (3, 2, 2)
    assert prior.embedding.shape == (3, 2, 4)
    assert prior.prior_cost.shape == (3, 2)
    assert prior.full_cost.shape == (5, 5)
    # cross block of the full cost equals the pairwise prior cost
    assert np.allclose(prior.full_cost.data[2:, :2], prior.prior_cost.data)
    assert prior.prior_cost.data.min() >= 0.0


def test_prior_field_raw_displacement_mode():
    params = toy_params()
    prev = np.array([[0.1, 0.2]])
    curr = np.array([[0.4, 0.6]])
    prior = build_prior_field(prev, curr, params.as_tensors(), mode="raw_displacement")
    assert prior.prior_cost.data[0, 0] == pytest.approx(0.5)


# ---------------------------------------------------------------------------
# icg forward


def rand_sets(rng, m, n, d=16):
    prev = dset(rng.normal(size=(m, d)), rng.uniform(0, 1, (m, 2)))
    curr = dset(rng.normal(size=(n, d)), rng.uniform(0, 1, (n, 2)))
    return prev, curr


def test_icg_theta_one_reduces_to_plain_attention():
    rng = np.random.default_rng(2)
    params = toy_params()
    prev, curr = rand_sets(rng, 3, 4)
    pt = params.as_tensors()
    prior = build_prior_field(prev.positions, curr.positions, pt)
    plain = icg_forward(prev, curr, None, pt)
    gated = icg_forward(prev, curr, prior, pt, theta_override=1.0)
    assert np.array_equal(plain.enriched.data, gated.enriched.data)
    assert np.array_equal(plain.attention_map, gated.modulated_map)


def test_icg_zero_gamma_reduces_to_plain_attention():
    rng = np.random.default_rng(3)
    params = toy_params()
    # all tokens at one position: bias-free phi embeds zero displacement to zero
    pos = np.full((3, 2), 0.4)
    prev = dset(rng.normal(size=(3, 16)), pos)
    curr = dset(rng.normal(size=(3, 16)), pos)
    pt = params.as_tensors()
    prior = build_prior_field(prev.positions, curr.positions, pt)
    assert np.abs(prior.full_cost.data).max() == 0.0
    plain = icg_forward(prev, curr, None, pt)
    gated = icg_forward(prev, curr, prior, pt)
    assert np.array_equal(plain.enriched.data, gated.enriched.data)


def test_icg_two_token_gating_by_hand():
    # equal keys make the softmax row uniform (0.5, 0.5); gate entries
    # theta**0 = 1 and theta**1 = 0.5 leave modulated weights (0.5, 0.25)
    params = copy_phi(toy_params())
    params.w_q = np.zeros((16, 16))
    params.w_k = np.zeros((16, 16))
    params.theta_raw = np.asarray(0.0)  # theta = 0.5
    rng = np.random.default_rng(4)
    prev = dset(rng.normal(size=(1, 16)), [[0.0, 0.0]])
    curr = dset(rng.normal(size=(1, 16)), [[1.0, 0.0]])
    pt = params.as_tensors()
    prior = build_prior_field(prev.positions, curr.positions, pt)
    out = icg_forward(prev, curr, prior, pt)
    assert np.allclose(out.attention_map, 0.5)
    assert np.allclose(out.modulated_map, [[0.5, 0.25], [0.25, 0.5]])


def test_icg_modulated_entries_never_exceed_plain():
    rng = np.random.default_rng(5)
    params = toy_params()
    prev, curr = rand_sets(rng, 4, 5)
    pt = params.as_tensors()
    prior = build_prior_field(prev.positions, curr.positions, pt)
    out = icg_forward(prev, curr, prior, pt)
    assert (out.modulated_map <= out.attention_map + 1e-15).all()
    assert np.abs(out.attention_map.sum(axis=1) - 1.0).max() < 1e-9


def test_icg_context_scalars_in_unit_interval():
    rng = np.random.default_rng(6)
    params = toy_params()
    prev, curr = rand_sets(rng, 3, 4)
    out = icg_forward(prev, curr, None, params.as_tensors())
    assert out.context_scalars.data.min() > 0.0
    assert out.context_scalars.data.max() < 1.0
    expected = group_context_scalars(out.quadrants)
    assert np.allclose(out.context_scalars.data, expected)


def test_icg_permutation_equivariance():
    rng = np.random.default_rng(7)
    params = toy_params()
    prev, curr = rand_sets(rng, 4, 3)
    pt = params.as_tensors()
    base = icg_forward(prev, curr, build_prior_field(prev.positions, curr.positions, pt), pt)
    perm = rng.permutation(4)
    prev_p = dset(prev.features[perm], prev.positions[perm])
    shuffled = icg_forward(prev_p, curr, build_prior_field(prev_p.positions, curr.positions, pt), pt)
    assert np.allclose(shuffled.enriched.data[:4], base.enriched.data[:4][perm], atol=1e-12)
    assert np.allclose(shuffled.enriched.data[4:], base.enriched.data[4:], atol=1e-12)


def test_dasa_distance_monotonicity():
    # with the norm-preserving projection, a larger displacement strictly
    # lowers that pair's gated attention weight when theta < 1
    params = copy_phi(toy_params())
    params.w_q = np.zeros((16, 16))
    params.w_k = np.zeros((16, 16))
    rng = np.random.default_rng(8)
    pt = params.as_tensors()
    prev = dset(rng.normal(size=(1, 16)), [[0.5, 0.5]])
    weights = []
    for dist in [0.1, 0.2, 0.4]:
        curr = dset(rng.normal(size=(1, 16)), [[0.5 + dist, 0.5]])
        prior = build_prior_field(prev.positions, curr.positions, pt)
        out = icg_forward(prev, curr, prior, pt)
        weights.append(out.modulated_map[1, 0])
    assert weights[0] > weights[1] > weights[2]


def test_icg_gradient_readout():
    from vicflow.gradcheck import _context_check

    rng = np.random.default_rng(9)
    for _ in range(5):
        report = _context_check(rng)
        assert report.passed, report


def test_multi_head_averages_maps():
    rng = np.random.default_rng(10)
    tokens = rng.normal(size=(4, 8))
    wq, wk, wv = rng.normal(size=(3, 8, 8))
    _, amap = self_attention(tokens, wq, wk, wv, heads=2)
    assert np.abs(amap.data.sum(axis=1) - 1.0).max() < 1e-9
