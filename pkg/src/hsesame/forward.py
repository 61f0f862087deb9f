"""Linear forward operator (leadfield) and noise-free field computation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .source_space import SourceGrid

# mu_0 / (4 pi), so synthetic fields come out in tesla for moments in A*m
_GAIN = 1e-7


class LeadfieldError(ValueError):
    pass


def grid_id(grid: SourceGrid) -> str:
    """Short content hash binding a leadfield to the grid it was built on."""
    return hashlib.sha1(np.ascontiguousarray(grid.points).tobytes()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Leadfield:
    """Forward matrix of shape ``(n_sensors, 3 * n_points)``.

    Columns ``3r, 3r+1, 3r+2`` hold the field of unit dipoles along x, y, z
    at grid point ``r``.
    """

    matrix: np.ndarray
    grid_ref: str = ""

    @property
    def n_sensors(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_points(self) -> int:
        return self.matrix.shape[1] // 3

    def block(self, r) -> np.ndarray:
        """``G(r)``: the ``n_sensors x 3`` submatrix of grid index ``r``."""
        return self.matrix[:, 3 * r:3 * r + 3]

    def columns(self, locations):
        locs = np.asarray(locations, dtype=np.intp)
        return self.matrix[:, (3 * locs[:, None] + np.arange(3)).ravel()]


def make_leadfield(matrix, grid: SourceGrid) -> Leadfield:
    G = np.array(matrix, dtype=float)
    if G.ndim != 2:
        raise LeadfieldError(f"leadfield must be a 2-D matrix, got ndim={G.ndim}")
    expected = 3 * grid.n_points
    if G.shape[1] != expected:
        raise LeadfieldError(
            f"leadfield has {G.shape[1]} columns, expected 3 x {grid.n_points} = {expected}")
    bad = np.argwhere(~np.isfinite(G))
    if bad.size:
        raise LeadfieldError(f"non-finite leadfield entry at row {bad[0, 0]}, col {bad[0, 1]}")
    G.setflags(write=False)
    return Leadfield(G, grid_id(grid))


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def save_leadfield(path, leadfield: Leadfield):
    """Write the matrix (``.npy`` binary or ``.csv`` text) plus a JSON sidecar."""
    path = Path(path)
    G = leadfield.matrix
    if path.suffix == ".npy":
        np.save(path, G)
    else:
        np.savetxt(path, G, delimiter=",", fmt="%.17g")
    _sidecar(path).write_text(json.dumps(
        {"n_sensors": int(G.shape[0]), "n_points": int(G.shape[1] // 3),
         "grid_ref": leadfield.grid_ref}, indent=2))


def load_leadfield(path, grid: SourceGrid) -> Leadfield:
    path = Path(path)
    if path.suffix == ".npy":
        G = np.load(path)
    else:
        G = np.loadtxt(path, delimiter=",", ndmin=2)
    side = _sidecar(path)
    if side.exists():
        meta = json.loads(side.read_text())
        if (meta["n_sensors"], meta["n_points"]) != (G.shape[0], G.shape[1] / 3):
            raise LeadfieldError(
                f"{path}: sidecar declares {meta['n_sensors']} x 3*{meta['n_points']}, "
                f"file holds {G.shape[0]} x {G.shape[1]}")
    return make_leadfield(G, grid)


def sphere_sensors(n_sensors, radius=0.12, min_elevation=-0.2):
    """Sensors spread over a spherical cap (Fibonacci lattice), centered at the origin."""
    i = np.arange(n_sensors) + 0.5
    z = 1.0 - i / n_sensors * (1.0 - min_elevation)
    phi = np.pi * (1 + 5**0.5) * i
    rho = np.sqrt(1 - z**2)
    return radius * np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])


def synth_leadfield(grid: SourceGrid, sensor_positions, seed, mixing_spread=0.1) -> Leadfield:
    """Deterministic synthetic leadfield with inverse-square fall-off.

    Sensor ``s`` sees a dipole at ``r`` through ``gain * M_s @ d / |d|^3``
    with ``d = s - r``: the potential of a dipole in an infinite homogeneous
    conductor, distorted per sensor by ``M_s = I + mixing_spread * N(0, 1)``.
    ``M_s`` depends only on the seed and the sensor index, so the same seed
    and sensors give consistent physics on any grid.
    """
    sensors = np.asarray(sensor_positions, dtype=float)
    if sensors.ndim != 2 or sensors.shape[1] != 3:
        raise LeadfieldError(f"sensor positions must have shape (n, 3), got {sensors.shape}")
    pts = grid.points
    center = pts.mean(axis=0)
    extent = np.max(np.linalg.norm(pts - center, axis=1))
    d = sensors[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(d, axis=-1)
    if np.any(dist == 0):
        s, r = np.argwhere(dist == 0)[0]
        raise LeadfieldError(f"sensor {s} coincides with grid point {r}")
    inside = np.linalg.norm(sensors - center, axis=1) <= extent
    if np.any(inside):
        raise LeadfieldError(
            f"sensor {int(np.argmax(inside))} lies inside the grid's bounding sphere")

    rng = np.random.default_rng(seed)
    mixing = np.eye(3) + mixing_spread * rng.standard_normal((sensors.shape[0], 3, 3))
    # row s of G(r) is M_s d_sr / |d_sr|^3
    response = np.einsum("sij,srj->sri", mixing, d)
    G = _GAIN * response / dist[..., None] ** 3
    return make_leadfield(G.reshape(sensors.shape[0], -1), grid)


def field_of(leadfield: Leadfield, locations, moments) -> np.ndarray:
    """Noise-free topography ``sum_d G(r_d) q_d``.

    ``moments`` has shape ``(n_D, 3)`` for one topography or ``(n_D, 3, T)``
    for a time course; the result is ``(n_sensors,)`` or ``(n_sensors, T)``.
    """
    locs = np.asarray(locations, dtype=np.intp).reshape(-1)
    q = np.asarray(moments, dtype=float)
    if len(set(locs.tolist())) != locs.size:
        raise ValueError("dipole locations must be distinct")
    if q.shape[0] != locs.size or (q.ndim > 1 and q.shape[1] != 3):
        raise ValueError(f"expected one 3-vector per dipole, got moments of shape {q.shape}")
    tail = q.shape[2:]
    if locs.size == 0:
        return np.zeros((leadfield.n_sensors,) + tail)
    out = leadfield.columns(locs) @ q.reshape(3 * locs.size, *tail)
    return out


def save_data(path, y):
    np.savetxt(path, np.atleast_2d(np.asarray(y, dtype=float)), delimiter=",", fmt="%.17g")


def load_data(path) -> np.ndarray:
    """Sensor data CSV, ``n_sensors`` rows by ``T`` columns."""
    y = np.loadtxt(path, delimiter=",", ndmin=2)
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{path}: data contain non-finite values")
    return y
