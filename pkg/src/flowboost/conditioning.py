"""Scored samples and the per-problem conditioning vectors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import geometry as geo
from .geometry import PointConfiguration, ProblemInstance, ProblemKind

FACE_TOL = 1e-3

# columns holding target quality (the rest describe the instance or slack)
QUALITY_COLUMNS = {
    ProblemKind.SPHERES: (0, 3),
    ProblemKind.CIRCLES: (1,),
    ProblemKind.HEILBRONN: (1,),
    ProblemKind.STAR: (1,),
}


@dataclass
class ScoredSample:
    config: PointConfiguration
    score: float
    condition: np.ndarray

    def to_record(self) -> dict:
        rec = {"points": self.config.points.tolist()}
        if self.config.radii is not None:
            rec["radii"] = self.config.radii.tolist()
        rec["score"] = self.score
        rec["condition"] = [float(c) for c in self.condition]
        return rec


def condition_dim(kind: ProblemKind) -> int:
    return 4 if kind in (ProblemKind.SPHERES, ProblemKind.CIRCLES) else 2


def face_contact_ratio(points: np.ndarray, r: float, box_side: float) -> float:
    """Fraction of centres within FACE_TOL * L of a face of the margin box [r, L - r]^d."""
    tol = FACE_TOL * box_side
    near = (np.abs(points - r) <= tol) | (np.abs(points - (box_side - r)) <= tol)
    return float(np.mean(np.any(near, axis=1)))


def condition_vector(instance: ProblemInstance, config: PointConfiguration, score: Optional[float] = None) -> np.ndarray:
    kind = instance.kind
    n = instance.count
    if score is None:
        score = geo.objective(instance, config)
    if kind is ProblemKind.SPHERES:
        L = instance.box_side
        r = 0.5 * score
        return np.array([r / L, float(n), face_contact_ratio(config.points, r, L), score / L])
    if kind is ProblemKind.CIRCLES:
        pts, rad = config.points, config.radii
        wall = np.minimum.reduce([pts[:, 0], 1 - pts[:, 0], pts[:, 1], 1 - pts[:, 1]]) - rad
        if n >= 2:
            i, j = geo.pair_indices(n)
            pair = float((geo.pair_distances(pts) - rad[i] - rad[j]).min())
        else:
            pair = 0.0
        return np.array([n / 128.0, score, pair, float(wall.min())])
    return np.array([n / 128.0, score])


def score_sample(instance: ProblemInstance, config: PointConfiguration) -> ScoredSample:
    s = geo.objective(instance, config)
    return ScoredSample(config, s, condition_vector(instance, config, s))


def sampling_condition(instance: ProblemInstance, conditions: np.ndarray, percentile: float = 95.0) -> np.ndarray:
    """Condition used at generation time.

    Quality columns take the given percentile of the training set in the
    improving direction; descriptive columns take the median.
    """
    C = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    if C.shape[0] == 0:
        raise ValueError("need at least one training condition")
    out = np.median(C, axis=0)
    q = percentile if instance.maximize else 100.0 - percentile
    for col in QUALITY_COLUMNS[instance.kind]:
        out[col] = np.percentile(C[:, col], q)
    return out
