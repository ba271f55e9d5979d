from __future__ import annotations

import itertools

import numpy as np
import pytest

from flowboost import geometry as geo
from flowboost import model as nn
from flowboost import sampler as smp
from flowboost.geometry import ProblemInstance
from flowboost.sampler import (
    ProjectionStall,
    SamplerSettings,
    gas_sample,
    gauss_newton_project,
    integrate_step,
    max_residual,
    objective_projection_step,
    proximal_relax,
    sample_prior,
    terminal_refine,
)
from flowboost.surrogates import HeilbronnSurrogateParams, heilbronn_softmin

HEIL = ProblemInstance("heilbronn", 6)
SPH = ProblemInstance("spheres", 10, 3)


def constant_field(dim, cond_dim, v):
    """Model whose velocity is the constant vector v at every point."""
    p = nn.init_params(nn.Architecture(dim, cond_dim, 8, 1, 2, 4), 0)
    p.tensors["head.b"] = np.asarray(v, dtype=np.float64)
    return p


def zero_field(dim, cond_dim):
    return constant_field(dim, cond_dim, np.zeros(dim))


def sphere_penalty(x, r, L=1.0):
    i, j = geo.pair_indices(len(x))
    h = np.maximum(2 * r - np.linalg.norm(x[i] - x[j], axis=1), 0.0)
    w = np.maximum(r - x, 0.0) + np.maximum(x - (L - r), 0.0)
    return 0.5 * (h @ h) + 0.5 * float((w * w).sum())


# --- priors -------------------------------------------------------------------------

def test_sphere_prior_near_margin_faces():
    r = 0.1
    for seed in range(20):
        x = sample_prior(SPH, np.random.default_rng(seed), r).points
        assert x.min() >= r and x.max() <= 1 - r
        gap = np.minimum(np.abs(x - r), np.abs(x - (1 - r))).min(axis=1)
        assert np.all(gap <= 0.1)


def test_lhs_one_point_per_stratum():
    inst = ProblemInstance("star", 4)
    for seed in range(50):
        x = sample_prior(inst, np.random.default_rng(seed)).points
        for k in range(2):
            assert sorted(np.floor(x[:, k] * 4).astype(int)) == [0, 1, 2, 3]


@pytest.mark.parametrize("inst", [HEIL, ProblemInstance("circles", 7), ProblemInstance("star", 9), SPH])
def test_prior_deterministic_and_in_box(inst):
    a = sample_prior(inst, np.random.default_rng(3), 0.05 if inst.kind is geo.ProblemKind.SPHERES else None)
    b = sample_prior(inst, np.random.default_rng(3), 0.05 if inst.kind is geo.ProblemKind.SPHERES else None)
    assert np.array_equal(a.points, b.points)
    assert a.points.shape == (inst.count, inst.dim)
    assert a.points.min() >= 0 and a.points.max() <= 1


def test_prior_radius_out_of_range():
    with pytest.raises(ValueError):
        sample_prior(SPH, np.random.default_rng(0), 0.5)


def test_settings_validation():
    with pytest.raises(ValueError):
        SamplerSettings(steps=0)
    with pytest.raises(ValueError):
        SamplerSettings(terminal_tol=0.0)
    with pytest.raises(ValueError):
        SamplerSettings(objective_step_temperature=(1e-4, 1e-3))


# --- integration --------------------------------------------------------------------

def test_zero_field_leaves_state(rng):
    x = rng.uniform(size=(3, 6, 2))
    out = integrate_step(zero_field(2, 2), x, 0.2, 0.3, np.zeros((3, 2)), 0.05, HEIL)
    assert np.array_equal(out, x)


def test_cap_inactive_is_midpoint(rng):
    v = np.array([0.03, -0.02])
    x = rng.uniform(0.3, 0.7, size=(2, 6, 2))
    out = integrate_step(constant_field(2, 2, v), x, 0.0, 0.5, np.zeros((2, 2)), 10.0, HEIL)
    assert np.allclose(out, x + 0.5 * v, atol=1e-15)


def test_cap_limits_displacement(rng):
    x = rng.uniform(0.3, 0.7, size=(1, 6, 2))
    out = integrate_step(constant_field(2, 2, [0.3, 0.4]), x, 0.0, 1.0, np.zeros((1, 2)), 0.05)
    assert np.allclose(np.linalg.norm(out - x, axis=-1), 0.05, atol=1e-15)


def test_reflection_law():
    x = np.full((1, 6, 2), 0.5)
    x[0, 0] = [0.95, 0.5]
    out = integrate_step(constant_field(2, 2, [0.1, 0.0]), x, 0.0, 1.0, np.zeros((1, 2)), 1.0, HEIL)
    overshoot = 0.05
    assert 0 <= out[0, 0, 0] <= 1
    assert abs((1 - out[0, 0, 0]) - overshoot) <= 1e-12


def test_sphere_reflection_into_adaptive_box(rng):
    x = rng.uniform(0.0, 1.0, size=(4, 10, 3))
    out = integrate_step(constant_field(3, 4, [0.2, -0.1, 0.05]), x, 0.0, 1.0, np.zeros((4, 4)), 1.0, SPH)
    for s in out:
        m = smp.adaptive_margin(s, 1.0)
        assert s.min() >= m - 1e-15 and s.max() <= 1 - m + 1e-15


def test_integrate_bad_times_and_nan():
    p = zero_field(2, 2)
    x = np.full((1, 6, 2), 0.5)
    with pytest.raises(ValueError):
        integrate_step(p, x, 0.5, 0.5, np.zeros((1, 2)), 0.05)
    bad = constant_field(2, 2, [np.nan, 0.0])
    with pytest.raises(FloatingPointError, match="step 7"):
        integrate_step(bad, x, 0.0, 0.1, np.zeros((1, 2)), 0.05, step=7)


# --- projection ---------------------------------------------------------------------

@pytest.mark.parametrize("h", [1e-6, 0.01, 0.1])
def test_symmetric_pair_separates_exactly(h):
    r = 0.2
    x = np.array([[0.5 - (r - h / 2), 0.5, 0.5], [0.5 + (r - h / 2), 0.5, 0.5]])
    out = gauss_newton_project(x, r, 1)
    assert abs(np.linalg.norm(out[0] - out[1]) - 2 * r) <= 1e-15


def test_feasible_config_unchanged():
    x = np.array([[0.2, 0.2], [0.8, 0.2], [0.5, 0.8]])
    out = gauss_newton_project(x, 0.1, 5)
    assert np.array_equal(out, x)


def test_random_tangle_monotone(rng):
    r = 0.12
    x = rng.uniform(0.2, 0.8, size=(10, 3))
    prev = max_residual(x, r)
    for _ in range(2000):
        if prev < 1e-12:
            break
        x = gauss_newton_project(x, r, 1)
        cur = max_residual(x, r)
        assert cur < prev
        prev = cur
    assert prev < 1e-12


def test_random_tangles_converge():
    r = 0.12
    for seed in range(100):
        x = np.random.default_rng(seed).uniform(0.2, 0.8, size=(10, 3))
        x = gauss_newton_project(x, r, 2000)
        assert max_residual(x, r) < 1e-12


@pytest.mark.parametrize("pairs", [1, 2, 3])
def test_disjoint_pairs_strictly_reduce(pairs):
    # pairs are placed far apart so each contact graph component is a single edge
    r = 0.05
    depths = [1e-6, 1e-3, 0.02, 0.05]
    centres = [np.array([0.25, 0.25]), np.array([0.75, 0.25]), np.array([0.5, 0.75])][:pairs]
    for combo in itertools.product(depths, repeat=pairs):
        for angle in (0.0, 0.7, 2.0):
            u = np.array([np.cos(angle), np.sin(angle)])
            pts = []
            for c, h in zip(centres, combo):
                half = r - h / 2
                pts += [c - half * u, c + half * u]
            x = np.array(pts)
            before = max_residual(x, r)
            after = max_residual(gauss_newton_project(x, r, 1), r)
            assert after < before


def test_coincident_pair_resolved():
    x = np.array([[0.5, 0.5], [0.5, 0.5]])
    out = gauss_newton_project(x, 0.1, 50, rng=np.random.default_rng(0))
    assert max_residual(out, 0.1) <= 1e-12


def test_projection_needs_positive_radius():
    with pytest.raises(ValueError):
        gauss_newton_project(np.zeros((2, 2)), 0.0, 1)


# --- proximal relaxation ------------------------------------------------------------

def test_proximal_fixed_point(rng):
    x = rng.uniform(0.2, 0.8, size=(2, 6, 2))
    out = proximal_relax(zero_field(2, 2), x, x.copy(), 0.4, np.zeros((2, 2)), SamplerSettings(), HEIL)
    assert np.array_equal(out, x)


@pytest.mark.parametrize("iters", [1, 2, 5])
def test_proximal_contraction_rate(rng, iters):
    s = SamplerSettings(proximal_iters=iters, proximal_step=0.1)
    x = rng.uniform(0.2, 0.8, size=(1, 6, 2))
    xp = rng.uniform(0.2, 0.8, size=(1, 6, 2))
    tau = 0.3
    anchor = (1 - tau) * xp + tau * x
    out = proximal_relax(zero_field(2, 2), x, xp, tau, np.zeros((1, 2)), s, HEIL)
    assert np.allclose(out - anchor, (1 - 0.1) ** iters * (x - anchor), atol=1e-14)


def test_proximal_objective_non_increasing():
    r = 0.12
    p = zero_field(3, 4)
    cond = np.array([[r, 10, 0.5, 2 * r]])
    for seed in range(50):
        g = np.random.default_rng(seed)
        x = g.uniform(0.1, 0.9, size=(1, 10, 3))
        xp = g.uniform(0.1, 0.9, size=(1, 10, 3))
        tau = g.uniform()
        anchor = (1 - tau) * xp[0] + tau * gauss_newton_project(x[0], r, 2)
        vals = []
        for k in range(6):
            y = proximal_relax(p, x, xp, tau, cond, SamplerSettings(proximal_iters=k), SPH, r)[0]
            vals.append(0.5 * float(((y - anchor) ** 2).sum()) + sphere_penalty(y, r))
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))


def test_proximal_bad_tau():
    with pytest.raises(ValueError):
        proximal_relax(zero_field(2, 2), np.zeros((1, 6, 2)), np.zeros((1, 6, 2)), 1.5,
                       np.zeros((1, 2)), SamplerSettings(), HEIL)


# --- objective steps ----------------------------------------------------------------

def _heil_loss(x, beta):
    return -heilbronn_softmin(x, HeilbronnSurrogateParams(beta=beta)).value


def test_objective_step_guarded(rng):
    s = SamplerSettings()
    for _ in range(30):
        x = rng.uniform(size=(6, 2))
        out = objective_projection_step(x, HEIL, 5e-3, s)
        g = -heilbronn_softmin(x, HeilbronnSurrogateParams(beta=s.heilbronn_beta)).gradient.reshape(x.shape)
        half = np.clip(x - 2.5e-3 * g / np.linalg.norm(g), 0, 1)
        full = np.clip(x - 5e-3 * g / np.linalg.norm(g), 0, 1)
        if _heil_loss(full, s.heilbronn_beta) <= _heil_loss(x, s.heilbronn_beta):
            assert np.array_equal(out, full)
        else:
            assert np.array_equal(out, half)
        assert out.min() >= 0 and out.max() <= 1


def test_objective_step_star_descends(rng):
    inst = ProblemInstance("star", 8)
    s = SamplerSettings()
    from flowboost.surrogates import StarSurrogateParams, star_surrogate, uniform_anchor_grid

    g = uniform_anchor_grid(s.star_grid)
    params = StarSurrogateParams(g, g, s.star_tau, s.star_beta)
    improved = 0
    for _ in range(20):
        x = rng.uniform(size=(8, 2))
        out = objective_projection_step(x, inst, 1e-3, s)
        improved += star_surrogate(out, params).value <= star_surrogate(x, params).value
    assert improved >= 15


def test_objective_step_zero_gradient(monkeypatch):
    class Flat:
        value = 0.0
        gradient = np.zeros(12)

    monkeypatch.setattr(smp, "heilbronn_softmin", lambda x, p: Flat())
    x = np.random.default_rng(0).uniform(size=(6, 2))
    assert np.array_equal(objective_projection_step(x, HEIL, 1e-2), x)


def test_objective_step_rejects_packings():
    with pytest.raises(ValueError):
        objective_projection_step(np.zeros((10, 3)), SPH, 1e-3)


def test_hooks_help_heilbronn():
    inst = ProblemInstance("heilbronn", 5)
    p = zero_field(2, 2)
    cond = np.array([5 / 128, 0.19])
    on = gas_sample(p, inst, 50, cond, SamplerSettings(steps=20), 0)
    off = gas_sample(p, inst, 50, cond, SamplerSettings(steps=20, objective_hooks=False), 0)
    a_on = np.median([geo.min_triangle_area(c) for c in on])
    a_off = np.median([geo.min_triangle_area(c) for c in off])
    assert a_on >= a_off


# --- terminal refinement ------------------------------------------------------------

def test_terminal_feasible_unchanged():
    x = np.array([[0.2, 0.2, 0.2], [0.8, 0.8, 0.8]])
    out, passes = terminal_refine(x, ProblemInstance("spheres", 2, 3), 0.1, 1e-8)
    assert passes == 0 and np.array_equal(out, x)


def test_terminal_resolves_near_contact():
    r = 0.1
    x = np.array([[0.5 - r + 5e-7, 0.5], [0.5 + r - 5e-7, 0.5]])
    out, passes = terminal_refine(x, ProblemInstance("spheres", 2, 2), r, 1e-8)
    assert passes >= 1
    assert max_residual(out, r) <= 1e-8


def test_terminal_stall():
    # no two centres fit 0.6 apart inside [0.3, 0.7]^2
    x = np.array([[0.4, 0.4], [0.6, 0.6], [0.5, 0.3]])
    with pytest.raises(ProjectionStall, match="projection stall"):
        terminal_refine(x, ProblemInstance("spheres", 3, 2), 0.3, 1e-8)


def test_terminal_clamps_planar():
    x = np.array([[1.2, -0.1], [0.5, 0.5], [0.1, 0.9]])
    out, passes = terminal_refine(x, ProblemInstance("heilbronn", 3), 0.0, 1e-8)
    assert passes == 0 and out.min() >= 0 and out.max() <= 1


# --- full sampler -------------------------------------------------------------------

def test_zero_model_spheres_feasible():
    inst = ProblemInstance("spheres", 12, 3)
    cond = np.array([0.12, 12, 0.5, 0.24])
    out = gas_sample(zero_field(3, 4), inst, 16, cond, SamplerSettings(steps=10), 0)
    assert all(c is not None for c in out)
    for c in out:
        score = geo.objective(inst, c)
        assert score > 0
        rep = geo.feasibility(c, inst, 0.5 * score)
        assert max(rep) <= 1e-8
        assert c.points.min() >= 0 and c.points.max() <= 1


def test_per_sample_seeding():
    inst = ProblemInstance("spheres", 8, 3)
    p = constant_field(3, 4, [0.01, -0.02, 0.0])
    cond = np.array([0.15, 8, 0.5, 0.3])
    s = SamplerSettings(steps=5, chunk_size=4)
    batch = gas_sample(p, inst, 6, cond, s, 10)
    single = gas_sample(p, inst, 1, cond, s, 14)
    assert np.array_equal(batch[4].points, single[0].points)


def test_workers_identical():
    inst = ProblemInstance("spheres", 8, 3)
    p = constant_field(3, 4, [0.01, -0.02, 0.0])
    cond = np.array([0.15, 8, 0.5, 0.3])
    s = SamplerSettings(steps=4, chunk_size=16)
    one = gas_sample(p, inst, 128, cond, s, 5, workers=1)
    four = gas_sample(p, inst, 128, cond, s, 5, workers=4)
    assert all(np.array_equal(a.points, b.points) for a, b in zip(one, four))


def test_circle_samples_carry_zero_radii():
    inst = ProblemInstance("circles", 5)
    out = gas_sample(zero_field(2, 4), inst, 3, np.array([5 / 128, 0.5, 0.0, 0.0]), SamplerSettings(steps=3), 0)
    assert all(np.array_equal(c.radii, np.zeros(5)) for c in out)


def test_non_finite_model_raises():
    bad = constant_field(2, 2, [np.inf, 0.0])
    with pytest.raises(FloatingPointError, match="step 0"):
        gas_sample(bad, HEIL, 2, np.array([6 / 128, 0.01]), SamplerSettings(steps=3), 0)
