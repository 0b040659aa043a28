"""Exact and entropic matching solvers.

``hungarian`` is an O(k^3) potentials implementation of minimum-cost
one-to-one assignment; ``sinkhorn`` solves entropically regularized optimal
transport in the log domain. Both are pure functions and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TransportPlan", "hungarian", "sinkhorn"]


@dataclass(frozen=True)
class TransportPlan:
    """Entropic transport plan with its convergence certificate."""

    plan: np.ndarray  # n x m, non-negative
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    epsilon: float
    iterations_used: int
    converged: bool
    row_residual: float
    col_residual: float

    def __post_init__(self):
        object.__setattr__(self, "plan", np.asarray(self.plan, dtype=np.float64))
        if self.plan.size and self.plan.min() < 0.0:
            raise ValueError("negative-plan-entry")

    def cost(self, cost_matrix: np.ndarray) -> float:
        return float((np.asarray(cost_matrix) * self.plan).sum())


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment covering min(n, m) pairs.

    Rectangular inputs are padded to square with a large sentinel, which
    forces maximal coverage of real cells. Returns the assigned (row, col)
    pairs sorted by row, and their total cost.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"shape-mismatch: cost must be 2-d, got {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        return [], 0.0
    if not np.isfinite(c).all():
        raise ValueError("non-finite-cost")

    k = max(n, m)
    sentinel = 1e6 * (1.0 + float(np.abs(c).max()))
    sq = np.full((k, k), sentinel)
    sq[:n, :m] = c

    col_of_row = _solve_square(sq)
    pairs = [(i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m]
    pairs.sort()
    total = float(sum(c[i, j] for i, j in pairs))
    return pairs, total


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Potentials ("shortest augmenting path") assignment on a square matrix."""
    k = cost.shape[0]
    u = np.zeros(k + 1)
    v = np.zeros(k + 1)
    p = np.zeros(k + 1, dtype=np.intp)  # p[j]: row matched to column j (1-based)
    way = np.zeros(k + 1, dtype=np.intp)
    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        minv = np.full(k + 1, np.inf)
        used = np.zeros(k + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = -1
            row = cost[i0 - 1]
            for j in range(1, k + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(k + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.zeros(k, dtype=np.intp)
    for j in range(1, k + 1):
        col_of_row[p[j] - 1] = j - 1
    return col_of_row


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = x.max(axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return (mx + np.log(np.exp(x - mx).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(
    cost,
    row_marginal=None,
    col_marginal=None,
    epsilon: float = 0.1,
    max_iter: int = 500,
    tol: float = 1e-6,
) -> TransportPlan:
    """Entropic optimal transport by alternating log-domain scaling.

    Marginals default to uniform vectors of equal unit mass. Iteration stops
    once both marginal residuals (max absolute deviation) drop to ``tol``;
    hitting ``max_iter`` first is reported through ``converged=False`` rather
    than raised, so callers can decide how much slack they tolerate.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"shape-mismatch: cost must be 2-d, got {c.shape}")
    n, m = c.shape
    if n == 0 or m == 0:
        raise ValueError("shape-mismatch: empty cost matrix")
    if epsilon <= 0.0:
        raise ValueError("epsilon-invalid: must be positive")
    a = np.full(n, 1.0 / n) if row_marginal is None else np.asarray(row_marginal, dtype=np.float64)
    b = np.full(m, 1.0 / m) if col_marginal is None else np.asarray(col_marginal, dtype=np.float64)
    if a.shape != (n,) or b.shape != (m,):
        raise ValueError("shape-mismatch: marginals do not match cost matrix")
    if a.min() <= 0.0 or b.min() <= 0.0:
        raise ValueError("marginal-not-positive")
    if abs(a.sum() - b.sum()) > 1e-9:
        raise ValueError("marginal-mass-mismatch")

    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(n)
    g = np.zeros(m)
    plan = np.full((n, m), a.sum() / (n * m))
    iterations = 0
    row_res = col_res = np.inf
    for iterations in range(1, max_iter + 1):
        f = epsilon * (log_a - _logsumexp((g[None, :] - c) / epsilon, axis=1))
        g = epsilon * (log_b - _logsumexp((f[:, None] - c) / epsilon, axis=0))
        plan = np.exp((f[:, None] + g[None, :] - c) / epsilon)
        row_res = float(np.abs(plan.sum(axis=1) - a).max())
        col_res = float(np.abs(plan.sum(axis=0) - b).max())
        if row_res <= tol and col_res <= tol:
            break
    converged = row_res <= tol and col_res <= tol
    return TransportPlan(
        plan=plan,
        row_marginal=a,
        col_marginal=b,
        epsilon=epsilon,
        iterations_used=iterations,
        converged=converged,
        row_residual=row_res,
        col_residual=col_res,
    )
