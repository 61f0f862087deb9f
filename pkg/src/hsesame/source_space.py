"""Discretized source space: candidate dipole locations and local proposals.

A :class:`SourceGrid` holds the candidate locations (in meters), the
neighbor lists used by the location Metropolis-Hastings move and the
row-normalized proposal kernel over those neighbors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

DEFAULT_NEIGHBOR_RADIUS = 0.02
DEFAULT_PROPOSAL_SCALE = 0.01


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SourceGrid:
    """Candidate source locations with a truncated Gaussian neighbor kernel.

    Parameters
    ----------
    points : ndarray, shape (n_points, 3)
        Coordinates in meters.
    neighbor_radius : float
        Points closer than this (self excluded) are neighbors.
    proposal_scale : float
        Width of the Gaussian kernel over neighbor distances.

    Use :func:`build_grid` rather than calling the constructor directly.
    """

    points: np.ndarray
    neighbor_radius: float
    proposal_scale: float
    neighbors: tuple = field(repr=False)
    proposal: sparse.csr_matrix = field(repr=False)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def distance(self, i, j):
        return np.linalg.norm(self.points[i] - self.points[j], axis=-1)

    def pairwise_distances(self) -> np.ndarray:
        diff = self.points[:, None, :] - self.points[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=-1))


def build_grid(points, neighbor_radius=DEFAULT_NEIGHBOR_RADIUS,
               proposal_scale=DEFAULT_PROPOSAL_SCALE) -> SourceGrid:
    """Validate ``points`` and precompute neighbor lists and proposal masses."""
    pts = np.array(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise GridError(f"points must have shape (n, 3), got {pts.shape}")
    if pts.shape[0] < 2:
        raise GridError("a source grid needs at least 2 points")
    if not np.all(np.isfinite(pts)):
        bad = np.argwhere(~np.isfinite(pts))[0]
        raise GridError(f"non-finite coordinate at point {bad[0]}")
    if not (neighbor_radius > 0 and proposal_scale > 0):
        raise GridError("neighbor_radius and proposal_scale must be positive")

    tree = cKDTree(pts)
    if tree.query_pairs(0.0):
        i, j = sorted(tree.query_pairs(0.0))[0]
        raise GridError(f"duplicate points {i} and {j}")

    n = pts.shape[0]
    neighbor_sets = tree.query_ball_point(pts, r=neighbor_radius)
    neighbors = []
    rows, cols, vals = [], [], []
    for i in range(n):
        nb = np.array(sorted(j for j in neighbor_sets[i] if j != i), dtype=np.intp)
        neighbors.append(nb)
        if nb.size == 0:
            continue
        d = np.linalg.norm(pts[nb] - pts[i], axis=1)
        mass = np.exp(-0.5 * (d / proposal_scale) ** 2)
        rows.append(np.full(nb.size, i))
        cols.append(nb)
        vals.append(mass / mass.sum())
    if rows:
        proposal = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(n, n))
    else:
        proposal = sparse.csr_matrix((n, n))
    pts.setflags(write=False)
    return SourceGrid(pts, float(neighbor_radius), float(proposal_scale),
                      tuple(neighbors), proposal)


def location_proposal(grid: SourceGrid, origin: int):
    """Return ``(indices, probabilities)`` of the local move from ``origin``.

    Both arrays are empty when ``origin`` has no neighbor; the caller then
    treats the move as a no-op.
    """
    if not 0 <= origin < grid.n_points:
        raise IndexError(f"grid index {origin} out of range")
    row = grid.proposal.getrow(origin)
    order = np.argsort(row.indices)
    return row.indices[order].astype(np.intp), row.data[order]


def regular_ball_grid(n_target, radius, center=(0.0, 0.0, 0.0)):
    """Points of a cubic lattice inside a ball, with roughly ``n_target`` points.

    The lattice spacing is found by bisection so that the count is as close
    as possible to ``n_target``.
    """
    center = np.asarray(center, dtype=float)

    def lattice(spacing):
        m = int(np.ceil(radius / spacing))
        ax = np.arange(-m, m + 1) * spacing
        g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        return g[np.linalg.norm(g, axis=1) <= radius]

    lo, hi = radius / 100.0, radius
    best = lattice(hi)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        g = lattice(mid)
        if abs(len(g) - n_target) < abs(len(best) - n_target):
            best = g
        if len(g) > n_target:
            lo = mid
        else:
            hi = mid
    return best + center


def random_ball_grid(n_points, radius, rng, min_distance=None):
    """``n_points`` uniform points inside a ball, optionally with a hard-core distance."""
    pts = []
    while len(pts) < n_points:
        cand = rng.uniform(-radius, radius, size=3)
        if np.linalg.norm(cand) > radius:
            continue
        if min_distance and pts and np.min(np.linalg.norm(np.array(pts) - cand, axis=1)) < min_distance:
            continue
        pts.append(cand)
    return np.array(pts)


def save_grid(path, points):
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z"])
        for p in np.asarray(points, dtype=float):
            writer.writerow([repr(float(c)) for c in p])


def load_grid(path, neighbor_radius=DEFAULT_NEIGHBOR_RADIUS,
              proposal_scale=DEFAULT_PROPOSAL_SCALE) -> SourceGrid:
    """Read a ``x,y,z`` CSV (meters, one point per row) into a grid."""
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header != ["x", "y", "z"]:
            raise GridError(f"{path}: expected header x,y,z, found {','.join(header)}")
        points = [[float(v) for v in row] for row in reader if row]
    return build_grid(points, neighbor_radius, proposal_scale)
