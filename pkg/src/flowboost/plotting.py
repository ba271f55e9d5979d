"""Matplotlib renderings for the report outputs."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .geometry import PointConfiguration, ProblemInstance, ProblemKind  # noqa: E402

# fixed metadata keeps the SVG bytes reproducible
_SVG_META = {"Date": None, "Creator": None}
_PNG_META = {"Software": None}


def _save(fig, path):
    path = str(path)
    if path.endswith(".svg"):
        matplotlib.rcParams["svg.hashsalt"] = "flowboost"
        fig.savefig(path, format="svg", metadata=_SVG_META)
    else:
        fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def histogram_figure(edges: np.ndarray, densities: dict, path, xlabel: str = "objective") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    widths = np.diff(edges)
    for name, dens in densities.items():
        ax.bar(edges[:-1], dens, width=widths, align="edge", alpha=0.5, label=name, edgecolor="none")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("density")
    if len(densities) > 1:
        ax.legend()
    fig.tight_layout()
    _save(fig, path)


def configuration_figure(instance: ProblemInstance, config: PointConfiguration, path, title: str = "") -> None:
    """Planar problems are drawn as-is; sphere centres are projected onto the first two axes."""
    fig, ax = plt.subplots(figsize=(5, 5))
    pts = config.points
    L = instance.box_side
    ax.add_patch(plt.Rectangle((0, 0), L, L, fill=False, lw=1.0))
    if instance.kind is ProblemKind.CIRCLES and config.radii is not None:
        for (x, y), r in zip(pts, config.radii):
            ax.add_patch(plt.Circle((x, y), r, fill=False, lw=0.8))
        ax.plot(pts[:, 0], pts[:, 1], ".", ms=2)
    elif instance.kind is ProblemKind.HEILBRONN:
        from .geometry import triangle_areas, triple_indices

        i, j, k = triple_indices(pts.shape[0])
        m = int(np.argmin(triangle_areas(pts)))
        tri = pts[[i[m], j[m], k[m], i[m]]]
        ax.fill(tri[:, 0], tri[:, 1], alpha=0.3)
        ax.plot(pts[:, 0], pts[:, 1], "o", ms=4)
    elif instance.kind is ProblemKind.SPHERES:
        from .geometry import min_pairwise_distance

        r = 0.5 * min_pairwise_distance(pts) if pts.shape[0] > 1 else 0.0
        for x, y in pts[:, :2]:
            ax.add_patch(plt.Circle((x, y), r, fill=False, lw=0.5, alpha=0.6))
    else:
        ax.plot(pts[:, 0], pts[:, 1], "o", ms=4)
    ax.set_xlim(-0.02 * L, 1.02 * L)
    ax.set_ylim(-0.02 * L, 1.02 * L)
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def trajectory_figure(rounds: list, best: list, path, ylabel: str = "best objective") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(rounds, best, "o-")
    ax.set_xlabel("round")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    _save(fig, path)
