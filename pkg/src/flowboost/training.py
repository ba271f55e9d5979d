"""Conditional flow matching: time sampling, loss with endpoint penalty, training loop.

Time convention throughout: t = 0 is data, t = 1 is prior.
    x_t = t * x_prior + (1 - t) * x_data,   v* = x_data - x_prior,
so the endpoint estimate from any (x_t, t) is x_t + t * v.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import model as nn
from .geometry import ProblemInstance, ProblemKind
from .surrogates import (
    HeilbronnSurrogateParams,
    StarSurrogateParams,
    heilbronn_softmin,
    overlap_energy,
    star_surrogate,
    uniform_anchor_grid,
)

log = logging.getLogger(__name__)


@dataclass
class TrainHyper:
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    grad_clip_norm: float = 1.0
    penalty_weight_max: float = 0.0
    time_mixture_weight: float = 0.5
    time_power: float = 2.0
    top_fraction: float = 1.0
    seed: int = 0
    weight_decay: float = 0.01
    align_tokens: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if not 0.0 <= self.time_mixture_weight <= 1.0:
            raise ValueError("time_mixture_weight must lie in [0, 1]")
        if not 0.0 < self.top_fraction <= 1.0:
            raise ValueError("top_fraction must lie in (0, 1]")


def sample_time(rng: np.random.Generator, hyper: TrainHyper, size: int = 1) -> np.ndarray:
    """Mixture of u**gamma (weight w) and uniform; the power law favours small t."""
    u = rng.uniform(size=size)
    mix = rng.uniform(size=size) < hyper.time_mixture_weight
    return np.where(mix, u ** hyper.time_power, rng.uniform(size=size))


def penalty_ramp(epoch: int, total_epochs: int, lam_max: float) -> float:
    if total_epochs < 1 or not 0 <= epoch < total_epochs:
        raise ValueError("epoch must lie in [0, total_epochs)")
    frac = min(1.0, epoch / (total_epochs / 2.0))
    return lam_max * 0.5 * (1.0 - math.cos(math.pi * frac))


def align_prior(x_prior: np.ndarray, x_data: np.ndarray) -> np.ndarray:
    """Reorder prior tokens to the minimum-cost matching with the data tokens.

    Both endpoints are unordered point sets, so the pairing is free; matching
    makes the regression target well-posed for an equivariant network.
    """
    out = np.empty_like(x_prior)
    for b in range(x_prior.shape[0]):
        cost = np.sum((x_data[b][:, None, :] - x_prior[b][None, :, :]) ** 2, axis=2)
        rows, cols = linear_sum_assignment(cost)
        out[b, rows] = x_prior[b, cols]
    return out


# --------------------------------------------------------------------------
# endpoint penalties: (x_hat (B,N,d), cond (B,C)) -> (mean value, d mean / d x_hat)


class SphereOverlapPenalty:
    def __init__(self, box_side: float = 1.0, beta: float = 200.0):
        self.L = box_side
        self.beta = beta

    def __call__(self, xhat, cond):
        B = xhat.shape[0]
        total, grad = 0.0, np.zeros_like(xhat)
        for b in range(B):
            r = max(cond[b, 0] * self.L, 1e-9)
            ev = overlap_energy(xhat[b], r, self.beta / self.L, strict=False)
            total += ev.value
            grad[b] = ev.gradient.reshape(xhat.shape[1:])
        return total / B, grad / B


class HeilbronnHingePenalty:
    """(target A_min - softmin(x_hat))_+ with the target read from the condition."""

    def __init__(self, beta: float = 300.0):
        self.params = HeilbronnSurrogateParams(beta=beta)

    def __call__(self, xhat, cond):
        B = xhat.shape[0]
        total, grad = 0.0, np.zeros_like(xhat)
        for b in range(B):
            ev = heilbronn_softmin(xhat[b], self.params)
            gap = cond[b, 1] - ev.value
            if gap > 0:
                total += gap
                grad[b] = -ev.gradient.reshape(xhat.shape[1:])
        return total / B, grad / B


class StarHingePenalty:
    """(smooth D*(x_hat) - target D*)_+ on a fixed uniform anchor grid."""

    def __init__(self, grid: int = 32, tau: float = 0.01, beta: float = 300.0):
        g = uniform_anchor_grid(grid)
        self.params = StarSurrogateParams(g, g, tau, beta)

    def __call__(self, xhat, cond):
        B = xhat.shape[0]
        total, grad = 0.0, np.zeros_like(xhat)
        for b in range(B):
            ev = star_surrogate(xhat[b], self.params)
            gap = ev.value - cond[b, 1]
            if gap > 0:
                total += gap
                grad[b] = ev.gradient.reshape(xhat.shape[1:])
        return total / B, grad / B


def default_penalty(instance: ProblemInstance):
    kind = instance.kind
    if kind is ProblemKind.SPHERES:
        return SphereOverlapPenalty(instance.box_side)
    if kind is ProblemKind.HEILBRONN:
        return HeilbronnHingePenalty()
    if kind is ProblemKind.STAR:
        return StarHingePenalty()
    return None  # circles: centres only, nothing to penalise


@dataclass
class LossResult:
    total: float
    flow: float
    penalty: float
    grads: dict
    velocity: np.ndarray = field(repr=False, default=None)


def cfm_loss(
    params: nn.ModelParams,
    x_prior: np.ndarray,
    x_data: np.ndarray,
    cond: np.ndarray,
    t: np.ndarray,
    penalty_weight: float = 0.0,
    penalty_hook: Optional[Callable] = None,
    sample_weights: Optional[np.ndarray] = None,
) -> LossResult:
    """Weighted batch mean of |v(x_t, t) - v*|^2 plus lambda * penalty(x_hat)."""
    x_prior = np.asarray(x_prior, dtype=np.float64)
    x_data = np.asarray(x_data, dtype=np.float64)
    B = x_data.shape[0]
    t = np.asarray(t, dtype=np.float64).reshape(B)
    w = np.ones(B) if sample_weights is None else np.asarray(sample_weights, dtype=np.float64)
    tt = t[:, None, None]
    x_t = tt * x_prior + (1.0 - tt) * x_data
    target = x_data - x_prior
    v, cache = nn.forward(params, x_t, t, cond, keep_cache=True)
    resid = v - target
    per = np.sum(resid * resid, axis=(1, 2))
    if not np.all(np.isfinite(per)):
        bad = int(np.flatnonzero(~np.isfinite(per))[0])
        raise FloatingPointError(f"non-finite loss at sample {bad}")
    flow = float(np.mean(w * per))
    d_v = 2.0 * w[:, None, None] * resid / B
    pen = 0.0
    if penalty_hook is not None and penalty_weight > 0.0:
        xhat = x_t + tt * v
        pen, d_xhat = penalty_hook(xhat, np.atleast_2d(cond))
        if not math.isfinite(pen):
            raise FloatingPointError("non-finite penalty")
        d_v = d_v + penalty_weight * tt * d_xhat
    grads = nn.backward(params, cache, d_v)
    return LossResult(flow + penalty_weight * pen, flow, pen, grads, v)


@dataclass
class TrainResult:
    student: nn.ModelParams
    teacher: nn.ModelParams
    epoch_losses: list


def train(
    x_data: np.ndarray,
    conditions: np.ndarray,
    instance: ProblemInstance,
    hyper: TrainHyper,
    arch: Optional[nn.Architecture] = None,
    init: Optional[nn.ModelParams] = None,
    prior_sampler: Optional[Callable] = None,
    penalty_hook="default",
) -> TrainResult:
    """Fit the velocity field to (prior, data) pairs; returns student and frozen teacher."""
    from .sampler import prior_radius, sample_prior

    X = np.asarray(x_data, dtype=np.float64)
    C = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    M = X.shape[0]
    if M == 0:
        raise ValueError("cannot train on an empty dataset")
    if C.shape[0] != M:
        raise ValueError("one condition row per sample is required")
    if init is not None:
        params = init.copy()
    else:
        if arch is None:
            arch = nn.Architecture(dim=instance.dim, cond_dim=C.shape[1])
        params = nn.init_params(arch, hyper.seed)
    if penalty_hook == "default":
        penalty_hook = default_penalty(instance)

    def prior(rng, c):
        if prior_sampler is not None:
            return prior_sampler(rng)
        return sample_prior(instance, rng, prior_radius(instance, c)).points

    rng = np.random.default_rng(hyper.seed)
    opt = nn.AdamW(hyper.learning_rate, weight_decay=hyper.weight_decay)
    losses = []
    for epoch in range(hyper.epochs):
        lam = penalty_ramp(epoch, hyper.epochs, hyper.penalty_weight_max)
        order = rng.permutation(M)
        acc, count = 0.0, 0
        for start in range(0, M, hyper.batch_size):
            idx = order[start : start + hyper.batch_size]
            xd = X[idx]
            xp = np.stack([prior(rng, C[i]) for i in idx])
            if hyper.align_tokens:
                xp = align_prior(xp, xd)
            t = sample_time(rng, hyper, len(idx))
            res = cfm_loss(params, xp, xd, C[idx], t, lam, penalty_hook)
            nn.clip_gradients(res.grads, hyper.grad_clip_norm)
            opt.step(params, res.grads)
            acc += res.flow * len(idx)
            count += len(idx)
        losses.append(acc / count)
        log.info(json.dumps({"event": "epoch", "epoch": epoch, "flow_loss": losses[-1], "penalty_weight": lam}))
    return TrainResult(params, params.copy(), losses)
