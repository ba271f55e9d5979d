"""Exact objective oracles and feasibility checks.

Everything here is non-differentiable ground truth: the smooth surrogates,
local search and the generative model are all validated against these
functions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple, Optional

import numpy as np

__all__ = [
    "ProblemKind",
    "ProblemInstance",
    "PointConfiguration",
    "FeasibilityReport",
    "min_pairwise_distance",
    "min_triangle_area",
    "triangle_areas",
    "exact_star_discrepancy",
    "feasibility",
    "sum_radii",
    "wall_clearance",
    "sphere_separation",
    "objective",
    "better",
]


class ProblemKind(str, enum.Enum):
    SPHERES = "spheres"
    CIRCLES = "circles"
    HEILBRONN = "heilbronn"
    STAR = "star"


@dataclass(frozen=True)
class ProblemInstance:
    kind: ProblemKind
    count: int
    dim: int = 2
    box_side: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ProblemKind(self.kind))
        if self.kind is not ProblemKind.SPHERES and self.dim != 2:
            raise ValueError(f"{self.kind.value} is a planar problem, got dim={self.dim}")
        if self.count < 1 or self.dim < 1:
            raise ValueError("count and dim must be positive")
        if self.box_side <= 0:
            raise ValueError("box_side must be positive")
        if self.kind is not ProblemKind.SPHERES and self.box_side != 1.0:
            raise ValueError(f"{self.kind.value} is defined on the unit square only")

    @property
    def maximize(self) -> bool:
        return self.kind is not ProblemKind.STAR

    @property
    def objective_direction(self) -> str:
        return "maximize" if self.maximize else "minimize"

    @property
    def has_radii(self) -> bool:
        return self.kind is ProblemKind.CIRCLES

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "count": self.count,
            "dim": self.dim,
            "box_side": self.box_side,
        }


@dataclass
class PointConfiguration:
    """N points in d dimensions, optionally with one radius per point."""

    points: np.ndarray
    radii: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise ValueError(f"points must be an (N, d) array, got shape {pts.shape}")
        self.points = pts
        if self.radii is not None:
            r = np.array(self.radii, dtype=np.float64).reshape(-1)
            if r.shape[0] != pts.shape[0]:
                raise ValueError(f"expected {pts.shape[0]} radii, got {r.shape[0]}")
            if np.any(r < 0):
                raise ValueError("radii must be non-negative")
            self.radii = r

    @classmethod
    def from_flat(cls, coords, dim: int, radii=None) -> "PointConfiguration":
        c = np.asarray(coords, dtype=np.float64)
        if c.size % dim:
            raise ValueError(f"{c.size} coordinates do not split into points of dim {dim}")
        return cls(c.reshape(-1, dim), radii)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def coords(self) -> np.ndarray:
        return self.points.reshape(-1)

    def copy(self) -> "PointConfiguration":
        return PointConfiguration(
            self.points.copy(), None if self.radii is None else self.radii.copy()
        )


class FeasibilityReport(NamedTuple):
    max_pair_violation: float
    max_wall_violation: float

    @property
    def feasible(self) -> bool:
        return self.max_pair_violation == 0.0 and self.max_wall_violation == 0.0


def _as_points(config) -> np.ndarray:
    if isinstance(config, PointConfiguration):
        return config.points
    return np.asarray(config, dtype=np.float64)


@lru_cache(maxsize=64)
def pair_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    i, j = np.triu_indices(n, k=1)
    return i, j


@lru_cache(maxsize=32)
def triple_indices(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lexicographic (i<j<k) index arrays for all C(n, 3) triples."""
    if n < 3:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, empty
    idx = np.array(
        [(i, j, k) for i in range(n) for j in range(i + 1, n) for k in range(j + 1, n)],
        dtype=np.intp,
    )
    return idx[:, 0].copy(), idx[:, 1].copy(), idx[:, 2].copy()


def pair_distances(points: np.ndarray) -> np.ndarray:
    i, j = pair_indices(points.shape[0])
    diff = points[i] - points[j]
    return np.sqrt(np.einsum("pk,pk->p", diff, diff))


def min_pairwise_distance(config) -> float:
    pts = _as_points(config)
    if pts.shape[0] < 2:
        raise ValueError("degenerate configuration: need at least two points")
    return float(pair_distances(pts).min())


def triangle_dets(points: np.ndarray) -> np.ndarray:
    """Signed doubled areas det(p_j - p_i, p_k - p_i) over all triples."""
    i, j, k = triple_indices(points.shape[0])
    pi, pj, pk = points[i], points[j], points[k]
    return (pj[:, 0] - pi[:, 0]) * (pk[:, 1] - pi[:, 1]) - (pk[:, 0] - pi[:, 0]) * (
        pj[:, 1] - pi[:, 1]
    )


def triangle_areas(config) -> np.ndarray:
    pts = _as_points(config)
    return 0.5 * np.abs(triangle_dets(pts))


def min_triangle_area(config) -> float:
    pts = _as_points(config)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("triangle areas are defined for planar points only")
    if pts.shape[0] < 3:
        raise ValueError("degenerate configuration: need at least three points")
    return float(triangle_areas(pts).min())


def exact_star_discrepancy(config) -> float:
    """Anchored star discrepancy of a planar point set in [0, 1]^2.

    The supremum over half-open boxes [0, a) x [0, b) is attained (as a limit)
    at corners on the critical grid; at each node both the closed count (box
    approached from outside) and the open count (approached from inside) are
    needed.
    """
    pts = _as_points(config)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("star discrepancy is implemented for planar points only")
    if np.any(pts < 0.0) or np.any(pts > 1.0) or not np.all(np.isfinite(pts)):
        raise ValueError("star discrepancy requires all coordinates in [0, 1]")
    n = pts.shape[0]
    x, y = pts[:, 0], pts[:, 1]
    gx = np.union1d(x, [1.0])
    gy = np.union1d(y, [1.0])
    lt_x = (x[:, None] < gx[None, :]).astype(np.float64)
    le_x = (x[:, None] <= gx[None, :]).astype(np.float64)
    lt_y = (y[:, None] < gy[None, :]).astype(np.float64)
    le_y = (y[:, None] <= gy[None, :]).astype(np.float64)
    open_count = lt_x.T @ lt_y
    closed_count = le_x.T @ le_y
    area = np.outer(gx, gy)
    over = closed_count / n - area
    under = area - open_count / n
    return float(max(over.max(), under.max(), 0.0))


def sum_radii(config: PointConfiguration) -> float:
    if config.radii is None:
        raise ValueError("configuration carries no radii")
    return float(np.sum(config.radii))


def wall_clearance(points: np.ndarray, box_side: float = 1.0) -> float:
    """Smallest distance from any coordinate to the box boundary (negative outside)."""
    return float(min(points.min(), (box_side - points).min()))


def sphere_separation(points: np.ndarray, box_side: float = 1.0) -> float:
    """Largest common sphere diameter the centres support inside the box.

    Equals the minimum pairwise distance whenever the adaptive wall constraint
    (every coordinate at least half that distance from each face) holds.
    """
    d = min_pairwise_distance(points)
    return float(min(d, 2.0 * wall_clearance(points, box_side)))


def feasibility(config: PointConfiguration, instance: ProblemInstance, r: float | None = None) -> FeasibilityReport:
    pts = config.points
    L = instance.box_side
    kind = instance.kind
    pair_v = 0.0
    wall_v = 0.0
    if kind is ProblemKind.SPHERES:
        if r is None:
            raise ValueError("sphere feasibility needs a radius")
        if pts.shape[0] >= 2:
            d = pair_distances(pts)
            pair_v = float(max(0.0, (2.0 * r - d).max()))
            margin = 0.5 * d.min()
        else:
            margin = r
        wall_v = float(max(0.0, (margin - pts).max(), (pts - (L - margin)).max()))
    elif kind is ProblemKind.CIRCLES:
        if config.radii is None:
            raise ValueError("circle feasibility needs radii")
        rad = config.radii
        if pts.shape[0] >= 2:
            i, j = pair_indices(pts.shape[0])
            d = pair_distances(pts)
            pair_v = float(max(0.0, (rad[i] + rad[j] - d).max()))
        excess = np.concatenate(
            [rad - pts[:, 0], rad - (L - pts[:, 0]), rad - pts[:, 1], rad - (L - pts[:, 1])]
        )
        wall_v = float(max(0.0, excess.max()))
    else:
        wall_v = float(max(0.0, (-pts).max(), (pts - L).max()))
    return FeasibilityReport(pair_v, wall_v)


def objective(instance: ProblemInstance, config: PointConfiguration) -> float:
    """Exact score of a configuration, in the instance's own direction."""
    kind = instance.kind
    if config.points.shape != (instance.count, instance.dim):
        raise ValueError(
            f"configuration shape {config.points.shape} does not match "
            f"instance ({instance.count}, {instance.dim})"
        )
    if kind is ProblemKind.SPHERES:
        return sphere_separation(config.points, instance.box_side)
    if kind is ProblemKind.CIRCLES:
        return sum_radii(config)
    if kind is ProblemKind.HEILBRONN:
        return min_triangle_area(config)
    return exact_star_discrepancy(config)


def better(instance: ProblemInstance, a: float, b: float) -> bool:
    """True when score ``a`` is strictly better than ``b``."""
    if math.isnan(a):
        return False
    if math.isnan(b):
        return True
    return a > b if instance.maximize else a < b
