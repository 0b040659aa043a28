import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vicflow.core import (
    AttentionQuadrants,
    DescriptorSet,
    FramePoints,
    MatchResult,
    SequenceResult,
    validate,
)


def frame(points, labels=None, masked=None, identity=None):
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    n = points.shape[0]
    return FramePoints(
        frame_id=0,
        points=points,
        labels=tuple(labels) if labels is not None else ("pedestrian",) * n,
        masked=np.zeros(n, dtype=bool) if masked is None else np.asarray(masked),
        identity=identity,
    )


def test_validate_ok():
    assert validate(frame([(0.5, 0.5)], labels=("pedestrian",))) is None


def test_validate_coordinate_out_of_range():
    out = validate(frame([(1.2, 0.5)]))
    assert out is not None and out.startswith("coordinate-out-of-range")


def test_validate_length_mismatch():
    bad = FramePoints(frame_id=0, points=np.array([[0.4, 0.4], [0.5, 0.5]]), labels=("pedestrian",), masked=np.zeros(2, bool))
    out = validate(bad)
    assert out is not None and out.startswith("length-mismatch")


def test_validate_unknown_label():
    out = validate(frame([(0.5, 0.5)], labels=("walker",)))
    assert out is not None and out.startswith("unknown-label")


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=0, max_size=12))
@settings(max_examples=50, deadline=None)
def test_validate_accepts_unit_square_points(pts):
    f = frame(np.array(pts, dtype=float).reshape(-1, 2))
    assert validate(f) is None


@given(
    st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=8),
    st.integers(0, 7),
    st.sampled_from([-0.2, 1.0001, 5.0]),
)
@settings(max_examples=50, deadline=None)
def test_validate_rejects_out_of_range(pts, idx, bad):
    arr = np.array(pts, dtype=float).reshape(-1, 2)
    arr[idx % arr.shape[0], idx % 2] = bad
    assert validate(frame(arr)) is not None


def test_descriptor_set_checks():
    with pytest.raises(ValueError, match="shape-mismatch"):
        DescriptorSet(features=np.zeros((3, 8)), positions=np.zeros((2, 2)), patch_shape=(2, 2))
    with pytest.raises(ValueError, match="dimension-indivisible"):
        DescriptorSet(features=np.zeros((2, 9)), positions=np.zeros((2, 2)), patch_shape=(2, 2))
    with pytest.raises(ValueError, match="non-finite"):
        DescriptorSet(features=np.full((1, 4), np.nan), positions=np.zeros((1, 2)), patch_shape=(2, 2))
    ok = DescriptorSet(features=np.ones((2, 8)), positions=np.zeros((2, 2)), patch_shape=(2, 2))
    assert ok.d == 8 and ok.count == 2


def test_attention_quadrants_row_sum_check():
    m, n = 2, 1
    full = np.full((3, 3), 1.0 / 3.0)
    q = AttentionQuadrants(prev=full[:m, :m], cls=full[:m, m:], match=full[m:, :m], curr=full[m:, m:])
    assert np.array_equal(q.reassemble(), full)
    with pytest.raises(ValueError, match="row-sum"):
        AttentionQuadrants(prev=np.ones((1, 1)), cls=np.ones((1, 1)), match=np.ones((1, 1)), curr=np.ones((1, 1)))


def test_match_result_threshold_consistency():
    p = np.array([[0.9, 0.1], [0.4, 0.6]])
    mm = (p >= 0.5).astype(int)
    r = MatchResult(probabilities=p, match_matrix=mm, inflow=0, outflow=0, group_cap=5)
    assert r.n == 2 and r.m == 2
    with pytest.raises(ValueError, match="threshold-inconsistency"):
        MatchResult(probabilities=p, match_matrix=1 - mm, inflow=0, outflow=0, group_cap=5)
    with pytest.raises(ValueError, match="flow-out-of-range"):
        MatchResult(probabilities=p, match_matrix=mm, inflow=5, outflow=0, group_cap=5)
    with pytest.raises(ValueError, match="probability-out-of-range"):
        MatchResult(probabilities=p * 2, match_matrix=mm, inflow=0, outflow=0, group_cap=5)


@given(st.integers(0, 50), st.lists(st.integers(0, 9), max_size=10))
@settings(max_examples=60, deadline=None)
def test_sequence_result_total_recomputable(first, inflows):
    r = SequenceResult(first_frame_count=first, per_pair_inflows=tuple(inflows), total=first + sum(inflows))
    assert r.total == r.first_frame_count + sum(r.per_pair_inflows)


def test_sequence_result_rejects_wrong_total():
    with pytest.raises(ValueError, match="total-mismatch"):
        SequenceResult(first_frame_count=3, per_pair_inflows=(1, 2), total=7)
    with pytest.raises(ValueError, match="negative-input"):
        SequenceResult(first_frame_count=-1, per_pair_inflows=(), total=-1)


def test_masked_points_excluded_from_visible():
    f = frame([(0.1, 0.1), (0.9, 0.9)], masked=[True, False])
    assert f.visible_count() == 1
    assert list(f.visible_index()) == [1]
