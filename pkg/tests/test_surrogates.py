from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowboost import geometry as geo
from flowboost.surrogates import (
    HeilbronnSurrogateParams,
    StarSurrogateParams,
    SumRadiiSurrogateParams,
    heilbronn_softmin,
    heilbronn_srp_loss,
    overlap_energy,
    softplus,
    star_surrogate,
    sumradii_srp_loss,
    uniform_anchor_grid,
)

from conftest import central_fd, rel_err


def smoothed_areas(p, eps):
    out = []
    n = len(p)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                det = (p[j, 0] - p[i, 0]) * (p[k, 1] - p[i, 1]) - (p[k, 0] - p[i, 0]) * (p[j, 1] - p[i, 1])
                out.append(0.5 * math.sqrt(det * det + eps))
    return np.array(out)


# --- overlap energy ----------------------------------------------------------

def test_overlap_at_contact():
    r = 0.1
    p = np.array([[0.0, 0, 0], [2 * r, 0, 0]])
    assert overlap_energy(p, r, 10.0).value == pytest.approx(math.log(2) / 10, rel=1e-12)


def test_overlap_far_apart_vanishes():
    r = 0.1
    p = np.array([[0.0, 0, 0], [2 * r + 10, 0, 0]])
    assert overlap_energy(p, r, 10.0).value <= 1e-40


def test_overlap_coincident_pair():
    with pytest.raises(ValueError, match="coincident pair"):
        overlap_energy(np.zeros((2, 3)), 0.1, 10.0)


def test_softplus_branches_agree():
    u = np.array([2.9, 3.0, 3.1])
    naive = np.log1p(np.exp(10 * u)) / 10
    assert np.allclose(softplus(u, 10.0), naive, rtol=1e-14)


def test_overlap_gradient_fd(rng):
    p = rng.uniform(size=(8, 3))
    r = 0.5 * geo.min_pairwise_distance(p) * 1.5
    ev = overlap_energy(p, r, 20.0)
    fd = central_fd(lambda z: overlap_energy(z.reshape(8, 3), r, 20.0).value, p.reshape(-1))
    assert rel_err(ev.gradient, fd) <= 1e-4


def test_overlap_symmetric_and_monotone(rng):
    p = rng.uniform(size=(6, 3))
    ev = overlap_energy(p, 0.2, 10.0)
    perm = rng.permutation(6)
    assert overlap_energy(p[perm], 0.2, 10.0).value == pytest.approx(ev.value, rel=1e-12)
    # moving a point away from its partner along the pair axis lowers each pair term
    two = np.array([[0.0, 0, 0], [0.3, 0, 0]])
    vals = [overlap_energy(two + np.array([[0, 0, 0], [s, 0, 0]]), 0.2, 10.0).value for s in np.linspace(0, 1, 11)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


# --- Heilbronn soft-min ------------------------------------------------------

def test_softmin_single_triangle():
    p = np.array([[0.1, 0.2], [0.9, 0.3], [0.4, 0.8]])
    prm = HeilbronnSurrogateParams(beta=40.0)
    assert heilbronn_softmin(p, prm).value == pytest.approx(smoothed_areas(p, prm.epsilon)[0], rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.sampled_from([40.0, 300.0]), st.integers(3, 9))
def test_softmin_sandwich(seed, beta, n):
    p = np.random.default_rng(seed).uniform(size=(n, 2))
    prm = HeilbronnSurrogateParams(beta=beta)
    areas = smoothed_areas(p, prm.epsilon)
    m = areas.min()
    v = heilbronn_softmin(p, prm).value
    assert m - math.log(areas.size) / beta - 1e-15 <= v <= m + 1e-15


def test_softmin_gradient_fd(rng):
    p = rng.uniform(size=(6, 2))
    prm = HeilbronnSurrogateParams(beta=40.0)
    ev = heilbronn_softmin(p, prm)
    fd = central_fd(lambda z: heilbronn_softmin(z.reshape(6, 2), prm).value, p.reshape(-1))
    assert rel_err(ev.gradient, fd) <= 1e-4


def test_softmin_active_set_sandwich(rng):
    p = rng.uniform(size=(10, 2))
    prm = HeilbronnSurrogateParams(beta=300.0, active_k=7)
    v = heilbronn_softmin(p, prm).value
    m = smoothed_areas(p, prm.epsilon).min()
    assert m - math.log(7) / 300 - 1e-12 <= v <= m + 1e-15


def test_srp_loss_inside_box(rng):
    p = rng.uniform(size=(5, 2))
    prm = HeilbronnSurrogateParams(beta=40.0)
    assert heilbronn_srp_loss(p, prm).value == pytest.approx(-heilbronn_softmin(p, prm).value, rel=1e-14)


def test_srp_loss_wall_term():
    p = np.array([[0.2, 0.2], [0.8, 0.3], [0.5, 0.9], [1.1, 0.5]])
    prm = HeilbronnSurrogateParams(beta=40.0, wall_weight=1.0)
    wall = heilbronn_srp_loss(p, prm).value + heilbronn_softmin(p, prm).value
    assert wall == pytest.approx(0.01, rel=1e-12)


def test_srp_loss_gradient_fd(rng):
    p = rng.uniform(0.05, 0.95, size=(7, 2))
    prm = HeilbronnSurrogateParams(beta=100.0, wall_weight=10.0)
    ev = heilbronn_srp_loss(p, prm)
    fd = central_fd(lambda z: heilbronn_srp_loss(z.reshape(7, 2), prm).value, p.reshape(-1))
    assert rel_err(ev.gradient, fd) <= 1e-4


# --- star surrogate ----------------------------------------------------------

def test_star_point_at_origin():
    prm = StarSurrogateParams([1.0], [1.0], tau_sigmoid=0.01, beta=1.0, epsilon=1e-12)
    assert star_surrogate(np.array([[0.0, 0.0]]), prm).value == pytest.approx(1e-6, rel=1e-3)


def test_star_point_at_anchor():
    prm = StarSurrogateParams([1.0], [1.0], tau_sigmoid=0.01, beta=1.0, epsilon=1e-12)
    assert star_surrogate(np.array([[1.0, 1.0]]), prm).value == pytest.approx(0.75, rel=1e-9)


def test_star_gradient_fd(rng):
    p = rng.uniform(size=(10, 2))
    g = uniform_anchor_grid(8)
    prm = StarSurrogateParams(g, g, tau_sigmoid=0.05, beta=30.0)
    ev = star_surrogate(p, prm)
    fd = central_fd(lambda z: star_surrogate(z.reshape(10, 2), prm).value, p.reshape(-1))
    assert rel_err(ev.gradient, fd) <= 1e-4


def test_star_full_top_k_is_unrestricted(rng):
    p = rng.uniform(size=(10, 2))
    g = uniform_anchor_grid(8)
    a = star_surrogate(p, StarSurrogateParams(g, g, 0.05, 30.0))
    b = star_surrogate(p, StarSurrogateParams(g, g, 0.05, 30.0, top_k=64))
    assert a.value == b.value
    assert np.array_equal(a.gradient, b.gradient)


def test_star_params_validation():
    with pytest.raises(ValueError):
        StarSurrogateParams([0.0, 0.5], [1.0])


# --- sum of radii ------------------------------------------------------------

def test_sumradii_tangent_pair():
    ev = sumradii_srp_loss([[0.25, 0.5], [0.75, 0.5]], [0.25, 0.25], SumRadiiSurrogateParams(1, 1, 1))
    assert ev.value == pytest.approx(-0.5, abs=1e-15)
    assert ev.gradient.size == 6


def test_sumradii_overlapping_pair():
    ev = sumradii_srp_loss([[0.25, 0.5], [0.75, 0.5]], [0.3, 0.3], SumRadiiSurrogateParams(1, 1, 1))
    assert ev.value == pytest.approx(2 * 0.0025 + 0.01 - 0.6, abs=1e-14)


def test_sumradii_coincident():
    with pytest.raises(ValueError, match="coincident pair"):
        sumradii_srp_loss([[0.5, 0.5], [0.5, 0.5]], [0.1, 0.1], SumRadiiSurrogateParams())


def test_sumradii_gradient_fd(rng):
    c = rng.uniform(0.1, 0.9, size=(5, 2))
    r = rng.uniform(0.05, 0.3, size=5)
    prm = SumRadiiSurrogateParams(3.0, 5.0, 1.0)
    x = np.concatenate([c.reshape(-1), r])
    ev = sumradii_srp_loss(c, r, prm)
    fd = central_fd(lambda z: sumradii_srp_loss(z[:10].reshape(5, 2), z[10:], prm).value, x)
    assert rel_err(ev.gradient, fd) <= 1e-4
