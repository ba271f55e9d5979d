"""Reward-guided fine-tuning: rewards, importance weights, consistency, exploration."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import geometry as geo
from . import model as nn
from .conditioning import condition_vector
from .geometry import PointConfiguration, ProblemInstance, ProblemKind
from .local_search import radii_lp
from .sampler import SamplerSettings, emit_packing, gas_sample, prior_radius, sample_prior
from .training import TrainHyper, align_prior, cfm_loss, sample_time

log = logging.getLogger(__name__)

CONTACT_FACTOR = 2.1
WALL_BAND = 0.1
SEVERITY_GAIN = 10.0


@dataclass
class FinetuneSettings:
    temperature: float = 1.0
    weight_cap: float = 5.0
    consistency_alpha: float = 0.3
    explore_magnitude: float = 0.5
    explore_mix: float = 0.7
    epochs: int = 5
    batch: int = 128
    grad_steps_per_epoch: int = 10
    z_epsilon: float = 1e-8
    learning_rate: float = 1e-4
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.weight_cap <= 0:
            raise ValueError("weight_cap must be positive")
        if self.consistency_alpha < 0:
            raise ValueError("consistency_alpha must be >= 0")
        if not 0.0 <= self.explore_mix <= 1.0:
            raise ValueError("explore_mix must lie in [0, 1]")
        if self.epochs < 1 or self.batch < 1 or self.grad_steps_per_epoch < 1:
            raise ValueError("epochs, batch and grad_steps_per_epoch must be >= 1")


def reward(instance: ProblemInstance, config: PointConfiguration) -> float:
    """Larger is better for every problem."""
    kind = instance.kind
    if kind is ProblemKind.SPHERES:
        return 0.5 * geo.min_pairwise_distance(config.points) / instance.box_side
    if kind is ProblemKind.HEILBRONN:
        return geo.min_triangle_area(config)
    if kind is ProblemKind.CIRCLES:
        return float(np.sum(radii_lp(config.points)))
    return -geo.exact_star_discrepancy(config)


def reward_weights(rewards, temperature: float = 1.0, weight_cap: Optional[float] = 5.0,
                   z_epsilon: float = 1e-8) -> np.ndarray:
    """exp(temperature * z) normalised to batch mean 1, then clipped to [0, weight_cap].

    Pass weight_cap=None for the pre-clip weights.
    """
    R = np.asarray(rewards, dtype=np.float64)
    if R.size == 0:
        raise ValueError("empty reward batch")
    sd = R.std()
    if sd + z_epsilon == 0.0:
        z = np.zeros_like(R)
    else:
        z = (R - R.mean()) / (sd + z_epsilon)
    a = temperature * z
    e = np.exp(a - a.max())
    w = e / e.mean()
    if weight_cap is not None:
        w = np.clip(w, 0.0, weight_cap)
    return w


def consistency_loss(student: nn.ModelParams, teacher: nn.ModelParams, x_t, t, cond):
    """Batch mean of |v_student - v_teacher|^2 and its gradient for the student."""
    v_s, cache = nn.forward(student, x_t, t, cond, keep_cache=True)
    v_t = nn.forward(teacher, x_t, t, cond)
    diff = v_s - v_t
    B = diff.shape[0]
    value = float(np.mean(np.sum(diff * diff, axis=(1, 2))))
    grads = nn.backward(student, cache, 2.0 * diff / B)
    return value, grads


# --------------------------------------------------------------------------
# exploration


def explore_move(x: np.ndarray, instance: ProblemInstance, r: float, settings: FinetuneSettings):
    """Unrepaired exploratory displacement for packings; returns (x', step bound M r s)."""
    L = instance.box_side
    n, dim = x.shape
    contact = np.zeros_like(x)
    depth = 0.0
    if n >= 2:
        i, j = geo.pair_indices(n)
        diff = x[i] - x[j]
        dist = np.sqrt(np.einsum("pk,pk->p", diff, diff))
        near = (dist < CONTACT_FACTOR * r) & (dist > 0)
        nhat = diff[near] / dist[near][:, None]
        for c in range(dim):
            contact[:, c] += np.bincount(i[near], weights=nhat[:, c], minlength=n)
            contact[:, c] -= np.bincount(j[near], weights=nhat[:, c], minlength=n)
        depth = float(max(0.0, (2.0 * r - dist).max()))
    band = WALL_BAND * L
    wall = (x < band).astype(np.float64) - (x > L - band).astype(np.float64)
    c = settings.explore_mix
    d = c * contact + (1.0 - c) * wall
    d /= np.linalg.norm(d) + 1e-12
    severity = 1.0 + SEVERITY_GAIN * depth / r
    bound = settings.explore_magnitude * r * severity
    return x + bound * d, bound


def explore(x: np.ndarray, instance: ProblemInstance, r: Optional[float], settings: FinetuneSettings,
            rng: np.random.Generator, sampler_settings: Optional[SamplerSettings] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    L = instance.box_side
    if instance.kind is not ProblemKind.SPHERES:
        jitter = settings.explore_magnitude * 0.01
        return np.clip(x + rng.uniform(-jitter, jitter, size=x.shape), 0.0, L)
    if r is None:
        r = 0.5 * geo.min_pairwise_distance(x)
    moved, _ = explore_move(x, instance, r, settings)
    return emit_packing(np.clip(moved, 0.0, L), instance, r, sampler_settings or SamplerSettings())


# --------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    student: nn.ModelParams
    epoch_log: list = field(default_factory=list)


def finetune(
    student: nn.ModelParams,
    teacher: nn.ModelParams,
    instance: ProblemInstance,
    settings: FinetuneSettings,
    sampler_settings: SamplerSettings,
    condition,
    seed: int,
    workers: int = 1,
    time_hyper: Optional[TrainHyper] = None,
) -> FinetuneResult:
    """Reward-weighted flow matching on the model's own explored samples,
    regularised toward the frozen teacher."""
    student = student.copy()
    th = time_hyper or TrainHyper()
    opt = nn.AdamW(settings.learning_rate, weight_decay=th.weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(settings.epochs):
        ep_seed = seed + 1_000_003 * (epoch + 1)
        raw = gas_sample(student, instance, settings.batch, condition, sampler_settings, ep_seed, workers)
        data, conds, rewards = [], [], []
        for k, cfg in enumerate(raw):
            if cfg is None:
                continue
            xr = np.random.default_rng(ep_seed + k)
            try:
                pts = explore(cfg.points, instance, None, settings, xr, sampler_settings)
            except (RuntimeError, ValueError) as exc:
                log.info(json.dumps({"event": "explore_failed", "reason": str(exc)}))
                continue
            conf = PointConfiguration(pts, np.zeros(instance.count) if instance.has_radii else None)
            rw = reward(instance, conf)
            if instance.has_radii:
                conf = PointConfiguration(pts, radii_lp(pts))
            data.append(pts)
            conds.append(condition_vector(instance, conf))
            rewards.append(rw)
        if not data:
            log.info(json.dumps({"event": "finetune_epoch_empty", "epoch": epoch}))
            continue
        X = np.stack(data)
        C = np.stack(conds)
        R = np.asarray(rewards)
        W = reward_weights(R, settings.temperature, settings.weight_cap, settings.z_epsilon)
        for _ in range(settings.grad_steps_per_epoch):
            idx = rng.permutation(len(X))
            xd = X[idx]
            xp = np.stack([sample_prior(instance, rng, prior_radius(instance, C[i])).points for i in idx])
            if th.align_tokens:
                xp = align_prior(xp, xd)
            t = sample_time(rng, th, len(idx))
            res = cfm_loss(student, xp, xd, C[idx], t, sample_weights=W[idx])
            grads = res.grads
            if settings.consistency_alpha > 0:
                tt = t[:, None, None]
                x_t = tt * xp + (1.0 - tt) * xd
                cval, cgrads = consistency_loss(student, teacher, x_t, t, C[idx])
                for k in grads:
                    grads[k] = grads[k] + settings.consistency_alpha * cgrads[k]
            nn.clip_gradients(grads, settings.grad_clip_norm)
            opt.step(student, grads)
        best = float(R.max())
        history.append({"epoch": epoch, "mean_reward": float(R.mean()), "best_reward": best, "samples": len(R)})
        log.info(json.dumps({"event": "finetune_epoch", **history[-1]}))
    return FinetuneResult(student, history)
