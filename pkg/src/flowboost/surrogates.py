"""Smooth surrogate objectives with hand-derived gradients.

Every function returns a :class:`SurrogateEval` whose gradient is aligned with
the flattened variable vector (point coordinates, then radii when present).
Lower values are better for all losses; the soft-min itself is returned as is
(higher is better) because it is reused by the flow-model penalty and the
sampler's objective steps.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .geometry import pair_indices, triple_indices

__all__ = [
    "SurrogateEval",
    "HeilbronnSurrogateParams",
    "StarSurrogateParams",
    "SumRadiiSurrogateParams",
    "softplus",
    "sigmoid",
    "overlap_energy",
    "separation_softmin",
    "heilbronn_softmin",
    "heilbronn_srp_loss",
    "wall_penalty",
    "star_surrogate",
    "sumradii_srp_loss",
    "uniform_anchor_grid",
    "critical_anchor_grid",
]

_DIST_EPS = 1e-18
_SIGMOID_CLAMP = 60.0
_SOFTPLUS_SWITCH = 30.0


class SurrogateEval(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass
class HeilbronnSurrogateParams:
    beta: float = 40.0
    epsilon: float = 1e-12
    active_k: Optional[int] = None
    wall_weight: float = 1e3

    def __post_init__(self):
        if self.beta <= 0 or self.epsilon <= 0 or self.wall_weight <= 0:
            raise ValueError("beta, epsilon and wall_weight must be positive")
        if self.active_k is not None and self.active_k < 1:
            raise ValueError("active_k must be at least 1")


@dataclass
class StarSurrogateParams:
    grid_x: np.ndarray
    grid_y: np.ndarray
    tau_sigmoid: float = 0.01
    beta: float = 100.0
    epsilon: float = 1e-12
    top_k: Optional[int] = None

    def __post_init__(self):
        self.grid_x = np.asarray(self.grid_x, dtype=np.float64)
        self.grid_y = np.asarray(self.grid_y, dtype=np.float64)
        for g in (self.grid_x, self.grid_y):
            if g.size == 0 or np.any(g <= 0.0) or np.any(g > 1.0):
                raise ValueError("anchor grids must be nonempty subsets of (0, 1]")
        if self.tau_sigmoid <= 0 or self.beta <= 0 or self.epsilon <= 0:
            raise ValueError("tau_sigmoid, beta and epsilon must be positive")


@dataclass
class SumRadiiSurrogateParams:
    wall_weight: float = 50.0
    overlap_weight: float = 50.0
    radius_bonus: float = 1.0

    def __post_init__(self):
        if min(self.wall_weight, self.overlap_weight, self.radius_bonus) <= 0:
            raise ValueError("all sum-of-radii weights must be positive")


def softplus(u: np.ndarray, beta: float) -> np.ndarray:
    """(1/beta) log(1 + exp(beta u)), switching to the asymptotic branch for large beta*u."""
    z = beta * np.asarray(u, dtype=np.float64)
    big = z > _SOFTPLUS_SWITCH
    safe = np.where(big, 0.0, z)
    return np.where(big, u + np.log1p(np.exp(-np.abs(z))) / beta, np.log1p(np.exp(safe)) / beta)


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.clip(z, -_SIGMOID_CLAMP, _SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-z))


def _pair_geometry(points: np.ndarray, strict: bool):
    i, j = pair_indices(points.shape[0])
    diff = points[i] - points[j]
    sq = np.einsum("pk,pk->p", diff, diff)
    if strict and np.any(sq == 0.0):
        raise ValueError("coincident pair")
    dist = np.sqrt(sq + _DIST_EPS)
    return i, j, diff, dist


def _scatter_rows(n: int, idx, vec: np.ndarray) -> np.ndarray:
    # row-wise scatter-add; bincount is much faster than np.add.at
    return np.stack([np.bincount(idx, weights=vec[:, c], minlength=n) for c in range(vec.shape[1])], axis=1)


def _scatter_pairs(n: int, dim: int, i, j, vec: np.ndarray) -> np.ndarray:
    return _scatter_rows(n, i, vec) - _scatter_rows(n, j, vec)


def overlap_energy(points, r: float, beta: float, strict: bool = True) -> SurrogateEval:
    """Sum over pairs of softplus(2r - |x_i - x_j|)."""
    pts = np.asarray(points, dtype=np.float64)
    if r <= 0 or beta <= 0:
        raise ValueError("r and beta must be positive")
    n, dim = pts.shape
    if n < 2:
        return SurrogateEval(0.0, np.zeros(n * dim))
    i, j, diff, dist = _pair_geometry(pts, strict)
    u = 2.0 * r - dist
    value = float(np.sum(softplus(u, beta)))
    # d/d dist of softplus(2r - dist) = -sigmoid(beta u)
    coef = -sigmoid(beta * u) / dist
    grad = _scatter_pairs(n, dim, i, j, coef[:, None] * diff)
    return SurrogateEval(value, grad.reshape(-1))


def _logsumexp_weights(z: np.ndarray):
    zmax = z.max()
    e = np.exp(z - zmax)
    s = e.sum()
    return zmax + np.log(s), e / s


def separation_softmin(points, beta: float, strict: bool = True) -> SurrogateEval:
    """Soft-min of pairwise distances, -(1/beta) log sum exp(-beta d_ij)."""
    pts = np.asarray(points, dtype=np.float64)
    n, dim = pts.shape
    i, j, diff, dist = _pair_geometry(pts, strict)
    lse, w = _logsumexp_weights(-beta * dist)
    value = -lse / beta
    coef = w / dist
    grad = _scatter_pairs(n, dim, i, j, coef[:, None] * diff)
    return SurrogateEval(float(value), grad.reshape(-1))


def _det_and_partials(pts: np.ndarray, ti, tj, tk):
    x, y = pts[:, 0], pts[:, 1]
    xi, xj, xk = x[ti], x[tj], x[tk]
    yi, yj, yk = y[ti], y[tj], y[tk]
    det = (xj - xi) * (yk - yi) - (xk - xi) * (yj - yi)
    # partial derivatives of det with respect to each vertex, as (dx, dy) pairs
    d_i = (yj - yk, xk - xj)
    d_j = (yk - yi, xi - xk)
    d_k = (yi - yj, xj - xi)
    return det, d_i, d_j, d_k


def active_triples(points, k: int, tol: float = 1e-12):
    """Indices of the k smallest-area triangles, widened to include near-ties."""
    pts = np.asarray(points, dtype=np.float64)
    ti, tj, tk = triple_indices(pts.shape[0])
    det, *_ = _det_and_partials(pts, ti, tj, tk)
    area = 0.5 * np.abs(det)
    if k >= area.size:
        return ti, tj, tk
    kth = np.partition(area, k - 1)[k - 1]
    sel = np.flatnonzero(area <= kth + tol)
    return ti[sel], tj[sel], tk[sel]


def heilbronn_softmin(points, params: HeilbronnSurrogateParams, triples=None) -> SurrogateEval:
    """Soft-min of the smoothed triangle areas (higher is better).

    ``triples`` overrides the index set; otherwise the ``active_k`` smallest
    triangles of ``points`` are used (all triangles when unset).
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if pts.shape[1] != 2 or n < 3:
        raise ValueError("heilbronn surrogate needs at least three planar points")
    if triples is None:
        if params.active_k is None:
            triples = triple_indices(n)
        else:
            triples = active_triples(pts, params.active_k)
    ti, tj, tk = triples
    det, d_i, d_j, d_k = _det_and_partials(pts, ti, tj, tk)
    s = np.sqrt(det * det + params.epsilon)
    area = 0.5 * s
    beta = params.beta
    lse, w = _logsumexp_weights(-beta * area)
    value = -lse / beta
    # d value / d area_t = w_t ; d area / d det = det / (2 s)
    coef = np.tile(w * det / (2.0 * s), 3)
    idx = np.concatenate([ti, tj, tk])
    gx = np.bincount(idx, weights=coef * np.concatenate([d_i[0], d_j[0], d_k[0]]), minlength=n)
    gy = np.bincount(idx, weights=coef * np.concatenate([d_i[1], d_j[1], d_k[1]]), minlength=n)
    grad = np.stack([gx, gy], axis=1)
    return SurrogateEval(float(value), grad.reshape(-1))


def wall_penalty(points, lower: float = 0.0, upper: float = 1.0) -> SurrogateEval:
    """Quadratic penalty sum([lower - x]_+^2 + [x - upper]_+^2) over all coordinates."""
    pts = np.asarray(points, dtype=np.float64)
    below = np.maximum(lower - pts, 0.0)
    above = np.maximum(pts - upper, 0.0)
    value = float(np.sum(below * below) + np.sum(above * above))
    grad = -2.0 * below + 2.0 * above
    return SurrogateEval(value, grad.reshape(-1))


def heilbronn_srp_loss(points, params: HeilbronnSurrogateParams, triples=None) -> SurrogateEval:
    soft = heilbronn_softmin(points, params, triples)
    wall = wall_penalty(points)
    return SurrogateEval(
        params.wall_weight * wall.value - soft.value,
        params.wall_weight * wall.gradient - soft.gradient,
    )


def uniform_anchor_grid(size: int) -> np.ndarray:
    """size anchors k/size, k = 1..size."""
    return np.arange(1, size + 1, dtype=np.float64) / size


def critical_anchor_grid(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    v = v[(v > 0.0) & (v <= 1.0)]
    return np.union1d(v, [1.0])


def star_box_deviation(points, params: StarSurrogateParams):
    """Smoothed signed deviation Delta(a, b) on the anchor grid, with the gates."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    tau = params.tau_sigmoid
    gx = sigmoid((params.grid_x[None, :] - pts[:, 0:1]) / tau)
    gy = sigmoid((params.grid_y[None, :] - pts[:, 1:2]) / tau)
    delta = (gx.T @ gy) / n - np.outer(params.grid_x, params.grid_y)
    return delta, gx, gy


def star_surrogate(points, params: StarSurrogateParams) -> SurrogateEval:
    """Log-sum-exp soft-max over anchored boxes of the smoothed |Delta|."""
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if pts.shape[1] != 2:
        raise ValueError("star surrogate is planar")
    delta, gx, gy = star_box_deviation(pts, params)
    s = np.sqrt(delta * delta + params.epsilon)
    flat = s.reshape(-1)
    if params.top_k is not None and params.top_k < flat.size:
        order = np.argsort(-np.abs(delta).reshape(-1), kind="stable")
        mask = np.zeros(flat.size, dtype=bool)
        mask[order[: params.top_k]] = True
    else:
        mask = np.ones(flat.size, dtype=bool)
    beta = params.beta
    z = np.where(mask, beta * flat, -np.inf)
    lse, w = _logsumexp_weights(z)
    value = lse / beta
    # d value / d Delta = w * Delta / s
    m = (w * delta.reshape(-1) / flat).reshape(delta.shape)
    tau = params.tau_sigmoid
    dgx = -gx * (1.0 - gx) / tau
    dgy = -gy * (1.0 - gy) / tau
    grad_x = np.sum(dgx * (gy @ m.T), axis=1) / n
    grad_y = np.sum(dgy * (gx @ m), axis=1) / n
    grad = np.stack([grad_x, grad_y], axis=1)
    return SurrogateEval(float(value), grad.reshape(-1))


def sumradii_srp_loss(points, radii, params: SumRadiiSurrogateParams, strict: bool = True) -> SurrogateEval:
    """Quadratic wall and overlap penalties minus alpha * sum(r).

    Gradient layout: 2N centre coordinates followed by N radii.
    """
    pts = np.asarray(points, dtype=np.float64)
    r = np.asarray(radii, dtype=np.float64)
    n = pts.shape[0]
    x, y = pts[:, 0], pts[:, 1]
    excess = [r - x, r - (1.0 - x), r - y, r - (1.0 - y)]
    pos = [np.maximum(e, 0.0) for e in excess]
    wall = sum(float(np.sum(p * p)) for p in pos)
    g_pts = np.zeros((n, 2))
    g_r = np.zeros(n)
    ww = params.wall_weight
    g_r += 2.0 * ww * (pos[0] + pos[1] + pos[2] + pos[3])
    g_pts[:, 0] += 2.0 * ww * (-pos[0] + pos[1])
    g_pts[:, 1] += 2.0 * ww * (-pos[2] + pos[3])
    overlap = 0.0
    if n >= 2:
        i, j, diff, dist = _pair_geometry(pts, strict)
        ov = np.maximum(r[i] + r[j] - dist, 0.0)
        overlap = float(np.sum(ov * ov))
        wo = params.overlap_weight
        c = 2.0 * wo * ov
        g_r += np.bincount(i, weights=c, minlength=n) + np.bincount(j, weights=c, minlength=n)
        g_pts += _scatter_pairs(n, 2, i, j, (-c / dist)[:, None] * diff)
    g_r -= params.radius_bonus
    value = ww * wall + params.overlap_weight * overlap - params.radius_bonus * float(np.sum(r))
    return SurrogateEval(value, np.concatenate([g_pts.reshape(-1), g_r]))
