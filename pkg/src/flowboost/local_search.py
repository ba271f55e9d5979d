"""Stochastic relaxation with perturbations (SRP) and the exact repair steps.

SRP is used twice in the pipeline: from random starts to build training data,
and as the "final push" that turns raw generator samples into strong local
optima before scoring.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from . import geometry as geo
from .geometry import PointConfiguration, ProblemInstance, ProblemKind
from .simplex import LPError, simplex_max
from .surrogates import (
    HeilbronnSurrogateParams,
    StarSurrogateParams,
    SumRadiiSurrogateParams,
    active_triples,
    critical_anchor_grid,
    heilbronn_srp_loss,
    overlap_energy,
    separation_softmin,
    star_surrogate,
    sumradii_srp_loss,
    uniform_anchor_grid,
    wall_penalty,
)

log = logging.getLogger(__name__)

SAFETY_SHRINK = 1e-9


@dataclass
class SrpSchedule:
    outer_iters: int = 500
    inner_steps: int = 60
    step_size: float = 0.035
    step_decay: float = 0.994
    perturb_scale: Optional[float] = None
    backtrack_budget: int = 6
    anneal: Optional[tuple[float, float]] = None
    wall_clamp: bool = True

    def __post_init__(self):
        if self.outer_iters < 1 or self.inner_steps < 1:
            raise ValueError("outer_iters and inner_steps must be >= 1")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.backtrack_budget < 0:
            raise ValueError("backtrack_budget must be >= 0")
        if self.anneal is not None:
            self.anneal = (float(self.anneal[0]), float(self.anneal[1]))
            if not 0 < self.anneal[0] <= self.anneal[1]:
                raise ValueError("anneal must satisfy 0 < beta0 <= betaF")


@dataclass
class PolishSettings:
    memory: int = 10
    grad_tol: float = 1e-8
    f_tol: float = 1e-12
    max_iters: int = 2000

    def __post_init__(self):
        if self.grad_tol <= 0 or self.f_tol <= 0 or self.memory < 1 or self.max_iters < 1:
            raise ValueError("polish tolerances and limits must be positive")


class DivergentPolish(RuntimeError):
    def __init__(self, message: str, last_finite: np.ndarray):
        super().__init__(message)
        self.last_finite = last_finite


# --------------------------------------------------------------------------
# surrogate objectives over flat variable vectors


class FlatObjective:
    """Callable surrogate over a flat variable vector.

    Subclasses may expose a sharpness (``set_beta``) and a cached index set
    that ``refresh`` recomputes from the current iterate.
    """

    lower: np.ndarray
    upper: np.ndarray

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def set_beta(self, beta: float) -> None:
        pass

    def refresh(self, x: np.ndarray) -> None:
        pass


class HeilbronnObjective(FlatObjective):
    def __init__(self, n: int, params: HeilbronnSurrogateParams):
        self.n = n
        self.params = HeilbronnSurrogateParams(**vars(params))
        self.triples = None
        self.lower = np.zeros(2 * n)
        self.upper = np.ones(2 * n)

    def set_beta(self, beta: float) -> None:
        self.params.beta = beta

    def refresh(self, x):
        if self.params.active_k is not None:
            self.triples = active_triples(x.reshape(self.n, 2), self.params.active_k)

    def __call__(self, x):
        ev = heilbronn_srp_loss(x.reshape(self.n, 2), self.params, self.triples)
        return ev.value, ev.gradient


class StarObjective(FlatObjective):
    """Star surrogate on a fixed uniform grid merged with the refreshed critical grid."""

    def __init__(self, n: int, params: StarSurrogateParams, critical: bool = True):
        self.n = n
        self.base_x = params.grid_x.copy()
        self.base_y = params.grid_y.copy()
        self.params = StarSurrogateParams(
            params.grid_x, params.grid_y, params.tau_sigmoid, params.beta, params.epsilon, params.top_k
        )
        self.critical = critical
        self.lower = np.zeros(2 * n)
        self.upper = np.ones(2 * n)

    def set_beta(self, beta):
        self.params.beta = beta

    def refresh(self, x):
        if self.critical:
            pts = x.reshape(self.n, 2)
            self.params.grid_x = np.union1d(self.base_x, critical_anchor_grid(pts[:, 0]))
            self.params.grid_y = np.union1d(self.base_y, critical_anchor_grid(pts[:, 1]))

    def __call__(self, x):
        ev = star_surrogate(x.reshape(self.n, 2), self.params)
        return ev.value, ev.gradient


class SumRadiiObjective(FlatObjective):
    def __init__(self, n: int, params: SumRadiiSurrogateParams):
        self.n = n
        self.params = params
        self.lower = np.zeros(3 * n)
        self.upper = np.concatenate([np.ones(2 * n), np.full(n, 0.5)])

    def __call__(self, x):
        n = self.n
        ev = sumradii_srp_loss(x[: 2 * n].reshape(n, 2), x[2 * n :], self.params, strict=False)
        return ev.value, ev.gradient


class SphereSpreadObjective(FlatObjective):
    """Separation surrogate for sphere centres in normalised (spread) coordinates.

    Points live in the full box [0, L]^d; a configuration there with minimum
    distance D maps to a sphere packing of diameter L D / (L + D) by the
    homothety in :func:`spread_to_packing`. The loss is the soft-min of pair
    distances (negated) plus a soft overlap energy at a reference radius that
    ``refresh`` resets to half the current minimum distance, plus a quadratic
    wall term.
    """

    def __init__(self, n: int, dim: int, box_side: float = 1.0, beta: float = 200.0,
                 beta_softplus: float = 200.0, wall_weight: float = 1e3):
        self.n, self.dim, self.L = n, dim, box_side
        self.beta = beta
        self.beta_softplus = beta_softplus
        self.wall_weight = wall_weight
        self.r_ref = None
        self.lower = np.zeros(n * dim)
        self.upper = np.full(n * dim, box_side)

    def set_beta(self, beta):
        self.beta = beta
        self.beta_softplus = beta

    def refresh(self, x):
        self.r_ref = 0.5 * geo.min_pairwise_distance(x.reshape(self.n, self.dim))

    def __call__(self, x):
        pts = x.reshape(self.n, self.dim)
        soft = separation_softmin(pts, self.beta / self.L, strict=False)
        wall = wall_penalty(pts, 0.0, self.L)
        value = -soft.value + self.wall_weight * wall.value
        grad = -soft.gradient + self.wall_weight * wall.gradient
        if self.r_ref is not None and self.r_ref > 0:
            ov = overlap_energy(pts, self.r_ref, self.beta_softplus / self.L, strict=False)
            value += ov.value
            grad = grad + ov.gradient
        return value, grad


# --------------------------------------------------------------------------
# SRP and polish


def _reference_value(objective: FlatObjective, x: np.ndarray, beta: Optional[float]) -> float:
    if beta is not None:
        objective.set_beta(beta)
    objective.refresh(x)
    return objective(x)[0]


def srp(
    x0: np.ndarray,
    objective: FlatObjective,
    schedule: SrpSchedule,
    rng_seed,
) -> np.ndarray:
    """Alternate random displacement with normalised gradient descent.

    Returns the iterate with the lowest surrogate value seen, measured at the
    final sharpness of the anneal schedule so values are comparable across
    outer iterations.
    """
    rng = np.random.default_rng(rng_seed)
    shape = np.shape(x0)
    x = np.array(x0, dtype=np.float64).reshape(-1)
    lo, hi = objective.lower, objective.upper
    ref_beta = schedule.anneal[1] if schedule.anneal else None
    best_x = x.copy()
    best_v = _reference_value(objective, x, ref_beta)
    eta = schedule.step_size
    n_outer = schedule.outer_iters
    for it in range(n_outer):
        if schedule.anneal:
            b0, bf = schedule.anneal
            frac = it / (n_outer - 1) if n_outer > 1 else 1.0
            objective.set_beta(b0 * (bf / b0) ** frac)
        objective.refresh(x)
        scale = schedule.perturb_scale if schedule.perturb_scale is not None else 0.5 * eta
        x = x + rng.uniform(-scale, scale, size=x.size)
        if schedule.wall_clamp:
            np.clip(x, lo, hi, out=x)
        v, g = objective(x)
        for _ in range(schedule.inner_steps):
            gnorm = math.sqrt(float(g @ g))
            if gnorm == 0.0 or not math.isfinite(gnorm):
                break
            step = eta
            for attempt in range(schedule.backtrack_budget + 1):
                xn = x - (step / gnorm) * g
                if schedule.wall_clamp:
                    np.clip(xn, lo, hi, out=xn)
                vn, gn = objective(xn)
                if vn <= v or attempt == schedule.backtrack_budget:
                    break
                step *= 0.5
            x, v, g = xn, vn, gn
        eta *= schedule.step_decay
        rv = _reference_value(objective, x, ref_beta)
        if rv < best_v:
            best_v, best_x = rv, x.copy()
    return best_x.reshape(shape)


def quasi_newton_polish(x0: np.ndarray, objective: FlatObjective, settings: PolishSettings,
                        bounds: Optional[tuple[np.ndarray, np.ndarray]] = None) -> np.ndarray:
    """Bound-constrained limited-memory quasi-Newton polish of a surrogate.

    The result never has a higher surrogate value than the (clipped) start.
    """
    shape = np.shape(x0)
    lo, hi = bounds if bounds is not None else (objective.lower, objective.upper)
    x = np.clip(np.array(x0, dtype=np.float64).reshape(-1), lo, hi)
    objective.refresh(x)
    v0, g0 = objective(x)
    if not math.isfinite(v0):
        raise DivergentPolish("divergent polish: non-finite start", x)
    last = {"x": x.copy()}

    def fun(z):
        v, g = objective(z)
        if not (math.isfinite(v) and np.all(np.isfinite(g))):
            raise DivergentPolish("divergent polish", last["x"].copy())
        last["x"] = z.copy()
        return v, g

    res = minimize(
        fun,
        x,
        jac=True,
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
        options={
            "maxcor": settings.memory,
            "gtol": settings.grad_tol,
            "ftol": settings.f_tol,
            "maxiter": settings.max_iters,
        },
    )
    out = np.clip(res.x, lo, hi)
    if objective(out)[0] > v0:
        out = x
    return out.reshape(shape)


# --------------------------------------------------------------------------
# exact sub-solvers


def _area_gradients(pts: np.ndarray, ti, tj, tk):
    i0, j0, k0 = ti, tj, tk
    pi, pj, pk = pts[i0], pts[j0], pts[k0]
    det = (pj[:, 0] - pi[:, 0]) * (pk[:, 1] - pi[:, 1]) - (pk[:, 0] - pi[:, 0]) * (pj[:, 1] - pi[:, 1])
    sgn = np.sign(det)
    n = pts.shape[0]
    grads = np.zeros((ti.size, n, 2))
    rows = np.arange(ti.size)
    grads[rows, i0, 0] = pj[:, 1] - pk[:, 1]
    grads[rows, i0, 1] = pk[:, 0] - pj[:, 0]
    grads[rows, j0, 0] = pk[:, 1] - pi[:, 1]
    grads[rows, j0, 1] = pi[:, 0] - pk[:, 0]
    grads[rows, k0, 0] = pi[:, 1] - pj[:, 1]
    grads[rows, k0, 1] = pj[:, 0] - pi[:, 0]
    return 0.5 * np.abs(det), 0.5 * sgn[:, None] * grads.reshape(ti.size, -1), det


def active_maxmin_refine(points: np.ndarray, k_active: int = 25, max_rounds: int = 50,
                         trust_radius: float = 0.01, seed: int = 0) -> np.ndarray:
    """Sequential-LP ascent on the smallest triangle area.

    Each round linearises the areas of the ``k_active`` smallest triangles
    and solves  max t  s.t.  A_k + g_k . dX >= t  inside an infinity-norm
    trust region intersected with the unit box. Steps that do not raise the
    exact minimum area halve the trust region.
    """
    rng = np.random.default_rng(seed)
    X = np.array(points, dtype=np.float64)
    n = X.shape[0]
    if X.shape[1] != 2 or k_active < 1:
        raise ValueError("active_maxmin_refine needs planar points and k_active >= 1")
    all_t = geo.triple_indices(n)
    best = X.copy()
    best_a = geo.min_triangle_area(X)
    radius = trust_radius
    for _ in range(max_rounds):
        areas = geo.triangle_areas(X)
        order = np.argsort(areas, kind="stable")[: min(k_active, areas.size)]
        if areas[order[0]] == 0.0:
            X = np.clip(X + rng.uniform(-1e-9, 1e-9, size=X.shape), 0.0, 1.0)
            continue
        ti, tj, tk = all_t[0][order], all_t[1][order], all_t[2][order]
        a, g, _ = _area_gradients(X, ti, tj, tk)
        flat = X.reshape(-1)
        lo = np.maximum(-radius, -flat)
        hi = np.minimum(radius, 1.0 - flat)
        nv = flat.size
        # variables: u = dX - lo in [0, hi - lo], s = t + C >= 0
        rhs_area = a + g @ lo
        shift = max(0.0, -float(rhs_area.min())) + 1.0
        A = np.zeros((a.size + nv, nv + 1))
        A[: a.size, :nv] = -g
        A[: a.size, nv] = 1.0
        A[a.size :, :nv] = np.eye(nv)
        b = np.concatenate([rhs_area + shift, hi - lo])
        c = np.zeros(nv + 1)
        c[nv] = 1.0
        try:
            sol, _ = simplex_max(c, A, np.maximum(b, 0.0))
        except LPError:
            radius *= 0.5
            if radius < 1e-9:
                break
            continue
        step = sol[:nv] + lo
        cand = np.clip(flat + step, 0.0, 1.0).reshape(n, 2)
        cand_a = geo.min_triangle_area(cand)
        if cand_a > best_a:
            gain = cand_a - best_a
            X, best, best_a = cand, cand.copy(), cand_a
            if gain < 1e-10:
                break
        else:
            radius *= 0.5
            if radius < 1e-9:
                break
    return best


def radii_lp(centers: np.ndarray, shrink: float = SAFETY_SHRINK) -> np.ndarray:
    """Exact maximum sum of radii for fixed centres, then a tiny safety shrink."""
    P = np.asarray(centers, dtype=np.float64)
    n = P.shape[0]
    if P.ndim != 2 or P.shape[1] != 2:
        raise ValueError("radii_lp needs planar centres")
    if np.any(P < 0.0) or np.any(P > 1.0):
        raise ValueError("centres must lie in the unit square")
    wall = np.minimum.reduce([P[:, 0], 1.0 - P[:, 0], P[:, 1], 1.0 - P[:, 1]])
    if n >= 2:
        i, j = geo.pair_indices(n)
        d = geo.pair_distances(P)
        if np.any(d == 0.0):
            raise ValueError("coincident centers")
        A = np.zeros((n + i.size, n))
        A[np.arange(n), np.arange(n)] = 1.0
        rows = n + np.arange(i.size)
        A[rows, i] = 1.0
        A[rows, j] = 1.0
        b = np.concatenate([wall, d])
    else:
        A = np.eye(n)
        b = wall
    r, _ = simplex_max(np.ones(n), A, b)
    out = np.maximum(0.0, r - shrink)
    # round-to-nearest can lose half an ulp more than the shrink; step back up
    over = (r - out) > shrink
    out[over] = np.nextafter(out[over], np.inf)
    return out


def physics_push_baseline(centers: np.ndarray, iters: int, step: float, seed: int = 0) -> np.ndarray:
    """Repulsion heuristic: move each centre along the normalised sum of
    (x_i - x_j) / |x_i - x_j|^2 over all other centres, then clamp."""
    rng = np.random.default_rng(seed)
    X = np.array(centers, dtype=np.float64)
    n, dim = X.shape
    if n < 2:
        return X
    for _ in range(iters):
        diff = X[:, None, :] - X[None, :, :]
        sq = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(sq, np.inf)
        zero = sq == 0.0
        if np.any(zero):
            a, b_ = np.nonzero(np.triu(zero))
            for p, q in zip(a, b_):
                u = rng.normal(size=dim)
                u /= np.linalg.norm(u)
                diff[p, q] = u * 1e-12
                diff[q, p] = -u * 1e-12
                sq[p, q] = sq[q, p] = 1e-24
        force = np.sum(diff / sq[:, :, None], axis=1)
        norms = np.linalg.norm(force, axis=1, keepdims=True)
        direction = np.divide(force, norms, out=np.zeros_like(force), where=norms > 0)
        X = np.clip(X + step * direction, 0.0, 1.0)
    return X


# --------------------------------------------------------------------------
# sphere coordinates


def spread_to_packing(z: np.ndarray, box_side: float = 1.0) -> np.ndarray:
    """Map spread points in [0, L]^d to sphere centres meeting the adaptive walls.

    With D the minimum distance of ``z``, the common radius is
    r = L D / (2 (L + D)) and centres are r + (L - 2r) z / L.
    """
    L = box_side
    D = geo.min_pairwise_distance(z)
    r = L * D / (2.0 * (L + D))
    return r + (L - 2.0 * r) * np.clip(z, 0.0, L) / L


def packing_to_spread(x: np.ndarray, box_side: float = 1.0) -> np.ndarray:
    L = box_side
    sep = geo.sphere_separation(x, L)
    r = max(0.0, 0.5 * sep)
    if L - 2.0 * r <= 0:
        return np.clip(x, 0.0, L)
    return np.clip((x - r) * L / (L - 2.0 * r), 0.0, L)


def fit_adaptive_walls(x: np.ndarray, box_side: float = 1.0) -> np.ndarray:
    """Smallest homothety about the box centre that satisfies the adaptive walls.

    Pair distances shrink by the same factor, so if every pair is at least
    2r apart and all centres lie in [r, L - r], they stay at least 2r apart.
    """
    L = box_side
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        return np.clip(x, 0.0, L)
    D = geo.min_pairwise_distance(x)
    reach = np.abs(x - 0.5 * L).max()
    s = min(1.0, 0.5 * L / (reach + 0.5 * D))
    if s == 1.0:
        return x.copy()
    out = 0.5 * L + s * (x - 0.5 * L)
    m = 0.5 * geo.min_pairwise_distance(out)
    return np.clip(out, m, L - m)


# --------------------------------------------------------------------------
# problem-specific final push


@dataclass
class PushSettings:
    """Every knob of the per-problem final push.

    ``srp`` is the stochastic phase; the ladders are the sharpness (or
    penalty-weight) continuations used by the deterministic polish.
    """

    srp: SrpSchedule = field(default_factory=SrpSchedule)
    polish: PolishSettings = field(default_factory=PolishSettings)
    # heilbronn
    heilbronn_anneal: tuple = (40.0, 300.0)
    heilbronn_wall_weight: float = 1e3
    heilbronn_active_k: Optional[int] = None
    heilbronn_polish_betas: tuple = (300.0, 1000.0, 3000.0, 10000.0)
    refine_k: int = 25
    refine_rounds: int = 50
    refine_trust: float = 0.01
    hops: int = 0
    hop_rounds: int = 40
    hop_jitter: float = 0.005
    # circles
    circle_wall_weight: float = 50.0
    circle_overlap_weight: float = 50.0
    circle_radius_bonus: float = 1.0
    circle_polish_weights: tuple = (50.0, 500.0, 5000.0, 50000.0)
    restart_radius: float = 0.01
    # star
    star_grid: int = 64
    star_anneal: tuple = (30.0, 300.0)
    star_tau: float = 0.01
    star_top_k: Optional[int] = None
    star_critical: bool = True
    star_polish_ladder: tuple = ((30.0, 0.02), (100.0, 0.01), (300.0, 0.005), (1000.0, 0.002), (3000.0, 0.001))
    # spheres
    sphere_anneal: tuple = (20.0, 1000.0)
    sphere_polish_betas: tuple = (1000.0, 3000.0, 10000.0, 30000.0, 100000.0)

    def __post_init__(self):
        for name in ("heilbronn_anneal", "star_anneal", "sphere_anneal"):
            a = tuple(float(v) for v in getattr(self, name))
            if len(a) != 2 or not 0 < a[0] <= a[1]:
                raise ValueError(f"{name} must be (beta0, betaF) with 0 < beta0 <= betaF")
            setattr(self, name, a)
        self.star_polish_ladder = tuple(tuple(float(v) for v in p) for p in self.star_polish_ladder)
        for name in ("heilbronn_polish_betas", "circle_polish_weights", "sphere_polish_betas"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.refine_k < 1 or self.refine_rounds < 0 or self.hops < 0:
            raise ValueError("refine_k >= 1, refine_rounds >= 0 and hops >= 0 are required")


def default_push_settings(kind: ProblemKind) -> PushSettings:
    kind = ProblemKind(kind)
    if kind is ProblemKind.HEILBRONN:
        return PushSettings(SrpSchedule(500, 60, 0.035, 0.994, None, 6), hops=25)
    if kind is ProblemKind.CIRCLES:
        return PushSettings(SrpSchedule(20, 60, 0.02, 0.9, None, 6))
    if kind is ProblemKind.STAR:
        return PushSettings(SrpSchedule(50, 30, 0.02, 0.95, None, 6))
    return PushSettings(SrpSchedule(200, 30, 0.05, 0.01 ** (1 / 200), None, 6))


def _with_anneal(schedule: SrpSchedule, anneal) -> SrpSchedule:
    return SrpSchedule(
        schedule.outer_iters, schedule.inner_steps, schedule.step_size, schedule.step_decay,
        schedule.perturb_scale, schedule.backtrack_budget, anneal, schedule.wall_clamp,
    )


def _push_heilbronn(x0: np.ndarray, s: PushSettings, seed: int) -> np.ndarray:
    n = x0.shape[0]
    obj = HeilbronnObjective(
        n, HeilbronnSurrogateParams(beta=s.heilbronn_anneal[0], active_k=s.heilbronn_active_k,
                                    wall_weight=s.heilbronn_wall_weight)
    )
    x = srp(x0.reshape(-1), obj, _with_anneal(s.srp, s.heilbronn_anneal), seed)
    for beta in s.heilbronn_polish_betas:
        obj.set_beta(beta)
        x = quasi_newton_polish(x, obj, s.polish)
    x = active_maxmin_refine(x.reshape(n, 2), s.refine_k, s.refine_rounds, s.refine_trust, seed)
    if s.hops:
        x = _relocation_hops(x, s, seed)
    return x


def _relocation_hops(x: np.ndarray, s: PushSettings, seed: int) -> np.ndarray:
    """Move one vertex of the smallest triangle (or, less often, any point) to a
    random spot, re-solve the local max-min problem, keep improvements."""
    rng = np.random.default_rng([seed, 1])
    n = x.shape[0]
    ti, tj, tk = geo.triple_indices(n)
    best, best_a = x, geo.min_triangle_area(x)
    for _ in range(s.hops):
        m = int(np.argmin(geo.triangle_areas(best)))
        if rng.uniform() < 0.7:
            k = (ti[m], tj[m], tk[m])[rng.integers(3)]
        else:
            k = rng.integers(n)
        y = best.copy()
        y[k] = rng.uniform(size=2)
        y = np.clip(y + rng.uniform(-s.hop_jitter, s.hop_jitter, size=y.shape), 0.0, 1.0)
        y = active_maxmin_refine(y, s.refine_k, s.hop_rounds, s.refine_trust, seed)
        a = geo.min_triangle_area(y)
        if a > best_a:
            best, best_a = y, a
    return best


def _push_circles(centers: np.ndarray, radii0: np.ndarray, s: PushSettings, seed: int):
    n = centers.shape[0]
    x = np.concatenate([centers.reshape(-1), radii0])
    params = SumRadiiSurrogateParams(s.circle_wall_weight, s.circle_overlap_weight, s.circle_radius_bonus)
    obj = SumRadiiObjective(n, params)
    x = np.clip(x, obj.lower, obj.upper)
    x = srp(x, obj, s.srp, seed)
    for w in s.circle_polish_weights:
        obj = SumRadiiObjective(n, SumRadiiSurrogateParams(w, w, s.circle_radius_bonus))
        x = quasi_newton_polish(x, obj, s.polish)
    c = x[: 2 * n].reshape(n, 2)
    return c, radii_lp(c)


def _push_star(x0: np.ndarray, s: PushSettings, seed: int) -> np.ndarray:
    n = x0.shape[0]
    g = uniform_anchor_grid(s.star_grid)
    obj = StarObjective(n, StarSurrogateParams(g, g, s.star_tau, s.star_anneal[0], top_k=s.star_top_k), s.star_critical)
    x = srp(np.clip(x0, 0.0, 1.0).reshape(-1), obj, _with_anneal(s.srp, s.star_anneal), seed)
    best, best_d = x, geo.exact_star_discrepancy(x.reshape(n, 2))
    for beta, tau in s.star_polish_ladder:
        obj = StarObjective(n, StarSurrogateParams(g, g, tau, beta, top_k=s.star_top_k), s.star_critical)
        x = quasi_newton_polish(x, obj, s.polish)
        d = geo.exact_star_discrepancy(x.reshape(n, 2))
        if d < best_d:
            best, best_d = x.copy(), d
    return best.reshape(n, 2)


class _FrozenSpread(SphereSpreadObjective):
    def refresh(self, x):
        pass


def _push_spheres(x0: np.ndarray, s: PushSettings, seed: int, box_side: float) -> np.ndarray:
    n, d = x0.shape
    z = packing_to_spread(np.clip(x0, 0.0, box_side), box_side).reshape(-1)
    b0 = s.sphere_anneal[0]
    obj = SphereSpreadObjective(n, d, box_side, beta=b0, beta_softplus=b0)
    z = srp(z, obj, _with_anneal(s.srp, s.sphere_anneal), seed)
    for beta in s.sphere_polish_betas:
        z = quasi_newton_polish(z, _FrozenSpread(n, d, box_side, beta=beta, beta_softplus=beta), s.polish)
    return spread_to_packing(z.reshape(n, d), box_side)


def final_push(config: PointConfiguration, instance: ProblemInstance, settings: Optional[PushSettings] = None,
               seed: int = 0):
    """SRP, polish and the exact sub-solve for one configuration; returns a ScoredSample.

    The (repaired) input itself competes with the pushed result, so the score
    never gets worse than the input's.
    """
    from .conditioning import score_sample

    s = settings or default_push_settings(instance.kind)
    pts = np.array(config.points, dtype=np.float64)
    if pts.shape != (instance.count, instance.dim):
        raise ValueError(f"configuration shape {pts.shape} does not match the instance")
    kind = instance.kind
    L = instance.box_side
    candidates = []
    if kind is ProblemKind.CIRCLES:
        c_in = np.clip(pts, 0.0, 1.0)
        r_in = config.radii if config.radii is not None else np.zeros(instance.count)
        candidates.append(PointConfiguration(c_in, radii_lp(c_in)))
        for k, r0 in enumerate((r_in, np.full(instance.count, s.restart_radius))):
            c, r = _push_circles(c_in, np.clip(r0, 0.0, 0.5), s, seed + k)
            candidates.append(PointConfiguration(c, r))
    elif kind is ProblemKind.HEILBRONN:
        candidates.append(PointConfiguration(np.clip(pts, 0.0, 1.0)))
        candidates.append(PointConfiguration(_push_heilbronn(np.clip(pts, 0.0, 1.0), s, seed)))
    elif kind is ProblemKind.STAR:
        candidates.append(PointConfiguration(np.clip(pts, 0.0, 1.0)))
        candidates.append(PointConfiguration(_push_star(pts, s, seed)))
    else:
        candidates.append(PointConfiguration(fit_adaptive_walls(np.clip(pts, 0.0, L), L)))
        candidates.append(PointConfiguration(_push_spheres(pts, s, seed, L)))
    scored = [score_sample(instance, c) for c in candidates]
    best = scored[0]
    for cand in scored[1:]:
        if geo.better(instance, cand.score, best.score):
            best = cand
    return best


def initial_configuration(instance: ProblemInstance, rng: np.random.Generator) -> PointConfiguration:
    n, d = instance.count, instance.dim
    if instance.kind is ProblemKind.STAR:
        out = np.empty((n, 2))
        for k in range(2):
            out[:, k] = (rng.permutation(n) + rng.uniform(size=n)) / n
        return PointConfiguration(out)
    pts = rng.uniform(0.0, instance.box_side, size=(n, d))
    if instance.kind is ProblemKind.CIRCLES:
        return PointConfiguration(pts, np.full(n, 0.01))
    return PointConfiguration(pts)


def _one_training_sample(args):
    instance, settings, s = args
    rng = np.random.default_rng(s)
    return final_push(initial_configuration(instance, rng), instance, settings, s)


def sort_samples(instance: ProblemInstance, samples: list) -> list:
    """Best first; ties keep their original order."""
    sign = -1.0 if instance.maximize else 1.0
    return sorted(samples, key=lambda smp: sign * smp.score)


def generate_training_set(instance: ProblemInstance, n_samples: int, top_fraction: float,
                          settings: Optional[PushSettings] = None, seed: int = 0, workers: int = 1) -> list:
    """Push n_samples random starts (sample i seeded with seed + i) and keep the best fraction."""
    if not 0.0 < top_fraction <= 1.0:
        raise ValueError("top_fraction must lie in (0, 1]")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    settings = settings or default_push_settings(instance.kind)
    jobs = [(instance, settings, seed + i) for i in range(n_samples)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(_one_training_sample, jobs, chunksize=max(1, n_samples // (4 * workers))))
    else:
        samples = [_one_training_sample(j) for j in jobs]
    keep = math.ceil(top_fraction * n_samples)
    return sort_samples(instance, samples)[:keep]
