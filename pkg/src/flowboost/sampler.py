"""Geometry-aware sampling: learned-flow integration interleaved with projection.

Model time t = 1 - tau, so integration runs tau: 0 (prior) -> 1 (data) and the
state obeys dx/dtau = v(x, 1 - tau).
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo
from . import model as nn
from .geometry import PointConfiguration, ProblemInstance, ProblemKind
from .local_search import fit_adaptive_walls
from .surrogates import (
    HeilbronnSurrogateParams,
    StarSurrogateParams,
    heilbronn_softmin,
    star_surrogate,
    uniform_anchor_grid,
)

log = logging.getLogger(__name__)

MAX_REFLECTIONS = 10
MAX_TERMINAL_PASSES = 500


class ProjectionStall(RuntimeError):
    pass


@dataclass
class SamplerSettings:
    steps: int = 40
    projection_iters: int = 2
    proximal_iters: int = 2
    proximal_step: float = 0.1
    proximal_weight: float = 1.0
    terminal_polish_steps: int = 20
    terminal_tol: float = 1e-8
    objective_step_temperature: tuple = (5e-3, 5e-4)
    step_cap: float = 0.05
    chunk_size: int = 16
    objective_hooks: bool = True
    heilbronn_beta: float = 1000.0
    star_beta: float = 300.0
    star_grid: int = 32
    star_tau: float = 0.01

    def __post_init__(self):
        self.objective_step_temperature = tuple(float(v) for v in self.objective_step_temperature)
        t0, t1 = self.objective_step_temperature
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.terminal_tol <= 0:
            raise ValueError("terminal_tol must be positive")
        if not t0 >= t1 > 0:
            raise ValueError("objective_step_temperature must satisfy start >= end > 0")
        if self.step_cap <= 0 or self.chunk_size < 1:
            raise ValueError("step_cap and chunk_size must be positive")


# --------------------------------------------------------------------------
# priors


def latin_hypercube(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, dim))
    for k in range(dim):
        out[:, k] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return out


def sphere_prior(n: int, dim: int, r: float, box_side: float, rng: np.random.Generator) -> np.ndarray:
    """Each centre on a random face of the margin box [r, L - r]^d, then jittered."""
    lo, hi = r, box_side - r
    pts = rng.uniform(lo, hi, size=(n, dim))
    axis = rng.integers(dim, size=n)
    side = rng.integers(2, size=n)
    pts[np.arange(n), axis] = np.where(side == 1, hi, lo)
    pts += rng.normal(0.0, 0.02 * box_side, size=pts.shape)
    return np.clip(pts, lo, hi)


def sample_prior(instance: ProblemInstance, rng: np.random.Generator, r: Optional[float] = None) -> PointConfiguration:
    n, d, L = instance.count, instance.dim, instance.box_side
    kind = instance.kind
    if kind is ProblemKind.SPHERES:
        if r is None:
            r = 0.0
        if not 0.0 <= r < 0.5 * L:
            raise ValueError("prior radius must lie in [0, L/2)")
        return PointConfiguration(sphere_prior(n, d, r, L, rng))
    if kind is ProblemKind.STAR:
        return PointConfiguration(latin_hypercube(n, 2, rng))
    return PointConfiguration(rng.uniform(size=(n, 2)))


def prior_radius(instance: ProblemInstance, cond) -> Optional[float]:
    if instance.kind is ProblemKind.SPHERES and cond is not None:
        return float(np.clip(cond[0] * instance.box_side, 0.0, 0.49 * instance.box_side))
    return None


# --------------------------------------------------------------------------
# integration


def reflect_into(x: np.ndarray, lo, hi) -> np.ndarray:
    """Mirror coordinates across the violated face; clamp after MAX_REFLECTIONS."""
    x = x.copy()
    for _ in range(MAX_REFLECTIONS):
        below, above = x < lo, x > hi
        if not (below.any() or above.any()):
            return x
        x = np.where(below, 2.0 * lo - x, x)
        x = np.where(above, 2.0 * hi - x, x)
    return np.clip(x, lo, hi)


def adaptive_margin(x: np.ndarray, box_side: float) -> float:
    if x.shape[0] < 2:
        return 0.0
    return min(0.5 * geo.min_pairwise_distance(x), 0.5 * box_side)


def reflect_state(instance: ProblemInstance, x: np.ndarray) -> np.ndarray:
    L = instance.box_side
    if instance.kind is ProblemKind.SPHERES:
        out = x.copy()
        for _ in range(MAX_REFLECTIONS):
            m = adaptive_margin(out, L)
            if np.all((out >= m) & (out <= L - m)):
                return out
            out = reflect_into(out, m, L - m)
        m = adaptive_margin(out, L)
        return np.clip(out, m, L - m)
    return reflect_into(x, 0.0, L)


def _cap(delta: np.ndarray, cap: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=-1, keepdims=True)
    scale = np.minimum(1.0, cap / np.maximum(norms, 1e-300))
    return delta * scale


def _field(params, x, t, cond, step=None):
    v = nn.forward(params, x, np.full(x.shape[0], t), cond)
    if not np.all(np.isfinite(v)):
        raise FloatingPointError("non-finite velocity" + ("" if step is None else f" at step {step}"))
    return v


def integrate_step(params, x: np.ndarray, tau0: float, tau1: float, cond, step_cap: float,
                   instance: Optional[ProblemInstance] = None, step: Optional[int] = None) -> np.ndarray:
    """Capped midpoint step of dx/dtau = v(x, 1 - tau) on a batch (B, N, d), then reflection."""
    if not 0.0 <= tau0 < tau1 <= 1.0:
        raise ValueError("need 0 <= tau0 < tau1 <= 1")
    h = tau1 - tau0
    k1 = _field(params, x, 1.0 - tau0, cond, step)
    xm = x + 0.5 * h * k1
    k2 = _field(params, xm, 1.0 - (tau0 + 0.5 * h), cond, step)
    out = x + _cap(h * k2, step_cap)
    if instance is None:
        return out
    return np.stack([reflect_state(instance, s) for s in out])


# --------------------------------------------------------------------------
# projection


def contact_directions(x: np.ndarray, r: float, box_side: float, rng=None):
    """Degree-normalised pair pushes plus wall pushes for the margin box [r, L - r].

    Returns (delta, max_pair_residual, max_wall_residual).
    """
    n = x.shape[0]
    delta = np.zeros_like(x)
    pair_res = 0.0
    if n >= 2:
        i, j = geo.pair_indices(n)
        diff = x[i] - x[j]
        dist = np.sqrt(np.einsum("pk,pk->p", diff, diff))
        h = 2.0 * r - dist
        act = h > 0
        if act.any():
            ai, aj, ad, ah, adist = i[act], j[act], diff[act], h[act], dist[act]
            zero = adist == 0.0
            if zero.any():
                rng = rng or np.random.default_rng(0)
                log.info(json.dumps({"event": "coincident_pair", "count": int(zero.sum())}))
                u = rng.normal(size=(int(zero.sum()), x.shape[1]))
                ad = ad.copy()
                ad[zero] = u / np.linalg.norm(u, axis=1, keepdims=True)
                adist = np.where(zero, 1.0, adist)
            nhat = ad / adist[:, None]
            deg = np.bincount(ai, minlength=n) + np.bincount(aj, minlength=n)
            push = 0.5 * ah[:, None] * nhat
            for c in range(x.shape[1]):
                delta[:, c] += np.bincount(ai, weights=push[:, c], minlength=n)
                delta[:, c] -= np.bincount(aj, weights=push[:, c], minlength=n)
            delta /= np.maximum(deg, 1)[:, None]
            pair_res = float(ah.max())
    lo, hi = r, box_side - r
    below = np.maximum(lo - x, 0.0)
    above = np.maximum(x - hi, 0.0)
    wall_res = float(max(below.max(), above.max()))
    delta += below - above
    return delta, pair_res, wall_res


def gauss_newton_project(x: np.ndarray, r: float, max_iters: int, box_side: float = 1.0, rng=None) -> np.ndarray:
    if r <= 0:
        raise ValueError("projection radius must be positive")
    x = np.array(x, dtype=np.float64)
    for _ in range(max_iters):
        delta, pr, wr = contact_directions(x, r, box_side, rng)
        if pr <= 0.0 and wr <= 0.0:
            break
        x = x + delta
    return x


def max_residual(x: np.ndarray, r: float, box_side: float = 1.0) -> float:
    _, pr, wr = contact_directions(x, r, box_side)
    return max(pr, wr)


def terminal_refine(x: np.ndarray, instance: ProblemInstance, r: float, tol: float) -> tuple[np.ndarray, int]:
    """Projection passes until every residual is below tol; returns (x, passes)."""
    L = instance.box_side
    x = np.array(x, dtype=np.float64)
    if instance.kind is not ProblemKind.SPHERES:
        return np.clip(x, 0.0, L), 0
    for passes in range(MAX_TERMINAL_PASSES + 1):
        delta, pr, wr = contact_directions(x, r, L)
        if pr <= tol and wr <= tol:
            return x, passes
        if passes == MAX_TERMINAL_PASSES:
            break
        x = x + delta
    raise ProjectionStall(f"projection stall: residual {max(pr, wr):.3e} after {MAX_TERMINAL_PASSES} passes")


def constraint_push(instance: ProblemInstance, x: np.ndarray, r: Optional[float]) -> np.ndarray:
    """Direction that reduces the active residuals (negative of J^T h)."""
    if instance.kind is ProblemKind.SPHERES and r:
        return contact_directions(x, r, instance.box_side)[0]
    return np.clip(x, 0.0, instance.box_side) - x


def proximal_relax(params, x, x_prior, tau, cond, settings: SamplerSettings,
                   instance: ProblemInstance, r: Optional[float] = None) -> np.ndarray:
    """Pull a batch toward the interpolant anchor while easing lookahead residuals.

    The anchor sits on the straight line between the prior draw and the
    projected lookahead endpoint, at the current integration time.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t = 1.0 - tau
    eta, lam = settings.proximal_step, settings.proximal_weight
    v = _field(params, x, t, cond)
    x_end = x + t * v
    x_proj = np.stack([_project_state(instance, s, r, settings.projection_iters) for s in x_end])
    anchor = (1.0 - tau) * x_prior + tau * x_proj
    for it in range(settings.proximal_iters):
        if it > 0:
            v = _field(params, x, t, cond)
        x_next = x + t * v
        push = np.stack([constraint_push(instance, s, r) for s in x_next])
        x = x - eta * ((x - anchor) - lam * push)
    return x


def _project_state(instance, x, r, iters):
    if instance.kind is ProblemKind.SPHERES and r:
        return gauss_newton_project(x, r, iters, instance.box_side)
    return np.clip(x, 0.0, instance.box_side)


def objective_projection_step(x: np.ndarray, instance: ProblemInstance, temperature: float,
                              settings: Optional[SamplerSettings] = None) -> np.ndarray:
    """One guarded normalised gradient step on the soft objective, clamped to the box."""
    settings = settings or SamplerSettings()
    kind = instance.kind
    if kind is ProblemKind.HEILBRONN:
        params = HeilbronnSurrogateParams(beta=settings.heilbronn_beta)

        def loss(z):
            ev = heilbronn_softmin(z, params)
            return -ev.value, -ev.gradient.reshape(z.shape)
    elif kind is ProblemKind.STAR:
        g = uniform_anchor_grid(settings.star_grid)
        params = StarSurrogateParams(g, g, settings.star_tau, settings.star_beta)

        def loss(z):
            ev = star_surrogate(z, params)
            return ev.value, ev.gradient.reshape(z.shape)
    else:
        raise ValueError("objective steps exist for heilbronn and star only")
    f0, g = loss(x)
    gn = float(np.linalg.norm(g))
    if gn == 0.0 or not math.isfinite(gn):
        return x.copy()
    step = temperature
    for attempt in range(2):
        cand = np.clip(x - step * g / gn, 0.0, 1.0)
        if loss(cand)[0] <= f0 or attempt == 1:
            return cand
        step *= 0.5
    return cand


# --------------------------------------------------------------------------
# full sampler


def _sample_chunk(args):
    params, instance, condition, settings, seeds = args
    return [_run_chunk(params, instance, condition, settings, seeds)]


def _run_chunk(params, instance: ProblemInstance, condition, settings: SamplerSettings, seeds):
    B = len(seeds)
    cond = np.broadcast_to(np.asarray(condition, dtype=np.float64), (B, len(condition))).copy()
    r = prior_radius(instance, condition)
    rngs = [np.random.default_rng(s) for s in seeds]
    x_prior = np.stack([sample_prior(instance, g, r).points for g in rngs])
    x = x_prior.copy()
    K = settings.steps
    t0, t1 = settings.objective_step_temperature
    hooks = settings.objective_hooks and instance.kind in (ProblemKind.HEILBRONN, ProblemKind.STAR)
    for k in range(K):
        tau0, tau1 = k / K, (k + 1) / K
        x = integrate_step(params, x, tau0, tau1, cond, settings.step_cap, instance, k)
        x = np.stack([_project_state(instance, s, r, settings.projection_iters) for s in x])
        if settings.proximal_iters > 0:
            x = proximal_relax(params, x, x_prior, tau1, cond, settings, instance, r)
        if hooks:
            temp = t0 * (t1 / t0) ** (k / max(1, K - 1))
            x = np.stack([objective_projection_step(s, instance, temp, settings) for s in x])
        x = np.stack([reflect_state(instance, s) if instance.kind is ProblemKind.SPHERES else np.clip(s, 0.0, instance.box_side) for s in x])
    out = []
    for b in range(B):
        s = x[b]
        try:
            if hooks:
                for _ in range(settings.terminal_polish_steps):
                    s = objective_projection_step(s, instance, t1, settings)
            elif instance.kind is ProblemKind.SPHERES:
                s = emit_packing(s, instance, r, settings)
            else:
                s, _ = terminal_refine(s, instance, r or 0.0, settings.terminal_tol)
            out.append(s)
        except (ProjectionStall, FloatingPointError, ValueError) as exc:
            log.info(json.dumps({"event": "sample_dropped", "seed": int(seeds[b]), "reason": str(exc)}))
            out.append(None)
    return out


def emit_packing(x: np.ndarray, instance: ProblemInstance, r: Optional[float], settings: SamplerSettings) -> np.ndarray:
    """Terminal refinement at the working radius, shrinking it if the projection stalls,
    then the homothety onto the adaptive walls."""
    L = instance.box_side
    work = r if r else 0.5 * adaptive_margin(x, L)
    for _ in range(20):
        try:
            x, _ = terminal_refine(x, instance, work, settings.terminal_tol)
            break
        except ProjectionStall:
            work *= 0.97
    else:
        raise ProjectionStall("projection stall")
    return fit_adaptive_walls(np.clip(x, 0.0, L), L)


def gas_sample(params, instance: ProblemInstance, n_samples: int, condition, settings: SamplerSettings,
               seed: int, workers: int = 1) -> list[Optional[PointConfiguration]]:
    """Generate n_samples configurations; dropped samples come back as None.

    Sample i uses seed + i and samples are processed in fixed chunks, so the
    output does not depend on the worker count.
    """
    seeds = [seed + i for i in range(n_samples)]
    chunks = [seeds[i : i + settings.chunk_size] for i in range(0, n_samples, settings.chunk_size)]
    jobs = [(params, instance, np.asarray(condition, dtype=np.float64), settings, c) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sample_chunk, jobs))
    else:
        results = [_sample_chunk(j) for j in jobs]
    out: list[Optional[PointConfiguration]] = []
    for res in results:
        for s in res[0]:
            out.append(None if s is None else _as_config(instance, s))
    dropped = sum(s is None for s in out)
    if dropped:
        log.info(json.dumps({"event": "gas_dropped", "count": dropped}))
    return out


def _as_config(instance, s):
    if instance.kind is ProblemKind.CIRCLES:
        return PointConfiguration(s, np.zeros(instance.count))
    return PointConfiguration(s)
