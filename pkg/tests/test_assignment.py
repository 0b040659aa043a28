import itertools

import numpy as np
import pytest

from vicflow.assignment import hungarian, sinkhorn


def brute_force_assignment(cost: np.ndarray) -> float:
    """Enumerate every injection of the smaller side into the larger."""
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def test_hungarian_two_by_two():
    pairs, total = hungarian([[1.0, 2.0], [2.0, 1.0]])
    assert pairs == [(0, 0), (1, 1)]
    assert total == 2.0


def test_hungarian_zero_diagonal():
    cost = np.full((4, 4), 100.0)
    np.fill_diagonal(cost, 0.0)
    pairs, total = hungarian(cost)
    assert pairs == [(i, i) for i in range(4)]
    assert total == 0.0


def test_hungarian_matches_brute_force_6x6():
    rng = np.random.default_rng(0)
    cost = rng.integers(0, 50, size=(6, 6)).astype(float)
    _, total = hungarian(cost)
    assert total == brute_force_assignment(cost)


def test_hungarian_rectangular():
    rng = np.random.default_rng(1)
    for shape in [(2, 5), (5, 2), (3, 7), (7, 3)]:
        cost = rng.uniform(0, 10, size=shape)
        pairs, total = hungarian(cost)
        assert len(pairs) == min(shape)
        rows = [r for r, _ in pairs]
        cols = [c for _, c in pairs]
        assert len(set(rows)) == len(rows) and len(set(cols)) == len(cols)
        assert total == pytest.approx(brute_force_assignment(cost), abs=1e-9)


def test_hungarian_random_oracle_battery():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, m = rng.integers(1, 8, size=2)
        cost = rng.integers(-20, 100, size=(n, m)).astype(float)
        _, total = hungarian(cost)
        assert total == brute_force_assignment(cost)


def test_hungarian_non_finite():
    with pytest.raises(ValueError, match="non-finite-cost"):
        hungarian([[np.inf, 1.0], [1.0, 2.0]])


def test_hungarian_empty():
    pairs, total = hungarian(np.zeros((0, 3)))
    assert pairs == [] and total == 0.0


def test_sinkhorn_constant_cost_uniform():
    plan = sinkhorn(np.ones((3, 4)) * 2.5)
    assert plan.converged
    assert np.abs(plan.plan - 1.0 / 12.0).max() < 1e-9


def test_sinkhorn_near_permutation():
    plan = sinkhorn(np.array([[0.0, 1.0], [1.0, 0.0]]), epsilon=0.01)
    assert plan.converged
    assert np.abs(plan.plan - np.array([[0.5, 0.0], [0.0, 0.5]])).max() < 1e-3


def test_sinkhorn_marginal_contract():
    rng = np.random.default_rng(3)
    for _ in range(20):
        cost = rng.uniform(0, 5, size=(6, 4))
        a = rng.uniform(0.5, 2.0, size=6)
        b = rng.uniform(0.5, 2.0, size=4)
        b *= a.sum() / b.sum()
        plan = sinkhorn(cost, a, b, epsilon=0.2, max_iter=2000, tol=1e-8)
        assert plan.converged
        assert np.abs(plan.plan.sum(axis=1) - a).max() <= 1e-8
        assert np.abs(plan.plan.sum(axis=0) - b).max() <= 1e-8
        assert plan.plan.min() >= 0.0


def test_sinkhorn_mass_mismatch():
    with pytest.raises(ValueError, match="marginal-mass-mismatch"):
        sinkhorn(np.zeros((2, 2)), np.array([1.0, 1.0]), np.array([0.4, 0.4]))


def test_sinkhorn_positive_marginals_required():
    with pytest.raises(ValueError, match="marginal-not-positive"):
        sinkhorn(np.zeros((2, 2)), np.array([0.0, 2.0]), np.array([1.0, 1.0]))


def test_sinkhorn_no_nan_for_large_costs_small_epsilon():
    rng = np.random.default_rng(4)
    cost = rng.uniform(-1e3, 1e3, size=(8, 8))
    plan = sinkhorn(cost, epsilon=1e-3, max_iter=200)
    assert np.isfinite(plan.plan).all()


def test_sinkhorn_cost_monotone_in_epsilon():
    rng = np.random.default_rng(5)
    for _ in range(5):
        cost = rng.uniform(0, 1, size=(5, 5))
        values = []
        for eps in [0.01, 0.05, 0.1, 0.5]:
            plan = sinkhorn(cost, epsilon=eps, max_iter=5000, tol=1e-9)
            values.append(plan.cost(cost))
        assert all(values[i] <= values[i + 1] + 1e-9 for i in range(len(values) - 1))


def test_sinkhorn_non_convergence_flagged():
    plan = sinkhorn(np.random.default_rng(6).uniform(0, 1, (5, 5)), epsilon=1e-3, max_iter=2, tol=1e-12)
    assert not plan.converged
    assert plan.iterations_used == 2
