"""Dense-tableau primal simplex for small problem-shaped LPs.

Solves ``max c.x  s.t.  A x <= b, x >= 0`` with ``b >= 0`` so the slack basis
is a feasible start and no phase one is needed. Pivoting uses Bland's rule,
which cannot cycle on degenerate vertices (the LPs here are highly degenerate:
many circles touch simultaneously).
"""
from __future__ import annotations

import numpy as np

__all__ = ["LPError", "UnboundedLP", "simplex_max"]

PIVOT_TOL = 1e-10


class LPError(RuntimeError):
    pass


class UnboundedLP(LPError):
    pass


def simplex_max(c, A, b, max_pivots: int = 50000) -> tuple[np.ndarray, float]:
    c = np.asarray(c, dtype=np.float64)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    m, n = A.shape
    if c.shape != (n,) or b.shape != (m,):
        raise ValueError("inconsistent LP dimensions")
    if np.any(b < 0):
        raise LPError("right-hand side must be non-negative")

    # rows 0..m-1: constraints, last row: reduced costs; last column: rhs
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n : n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -c
    basis = np.arange(n, n + m)

    for _ in range(max_pivots):
        reduced = T[m, :-1]
        candidates = np.flatnonzero(reduced < -PIVOT_TOL)
        if candidates.size == 0:
            break
        col = candidates[0]
        column = T[:m, col]
        positive = column > PIVOT_TOL
        if not np.any(positive):
            raise UnboundedLP("objective is unbounded")
        ratios = np.full(m, np.inf)
        ratios[positive] = T[:m, -1][positive] / column[positive]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL * max(1.0, abs(best)))
        row = ties[np.argmin(basis[ties])]
        T[row] /= T[row, col]
        factors = T[:, col].copy()
        factors[row] = 0.0
        T -= np.outer(factors, T[row])
        basis[row] = col
        # near-tie ratio choices can leave round-off negatives in the rhs
        rhs = T[:m, -1]
        rhs[(rhs < 0) & (rhs > -1e-9)] = 0.0
    else:
        raise LPError("pivot limit reached")

    x = np.zeros(n + m)
    x[basis] = T[:m, -1]
    sol = np.maximum(x[:n], 0.0)
    return sol, float(c @ sol)
