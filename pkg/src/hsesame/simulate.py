"""Synthetic multi-dipole datasets with separation and SNR constraints."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .forward import Leadfield, field_of
from .source_space import SourceGrid


class InfeasibleScenario(RuntimeError):
    pass


@dataclass(frozen=True)
class SimScenario:
    true_locations: tuple
    true_orientations: np.ndarray = field(repr=False)
    amplitude_peak: float = 2e-7
    T: int = 40
    min_separation: float = 0.03
    snr_floor_db: float = 3.0
    noise_sigma: float = 0.0

    @property
    def n_dipoles(self) -> int:
        return len(self.true_locations)

    def timecourse(self) -> np.ndarray:
        return bell_curve(self.T, self.amplitude_peak)

    def moments(self) -> np.ndarray:
        """Moments of shape ``(n_D, 3, T)``."""
        return self.true_orientations[:, :, None] * self.timecourse()[None, None, :]

    def to_json(self, grid: SourceGrid = None) -> dict:
        d = asdict(self)
        d["true_locations"] = [int(r) for r in self.true_locations]
        d["true_orientations"] = np.asarray(self.true_orientations).tolist()
        d["n_dipoles"] = self.n_dipoles
        if grid is not None:
            d["true_coordinates"] = grid.points[list(self.true_locations)].tolist()
        return d

    @classmethod
    def from_json(cls, d) -> "SimScenario":
        return cls(tuple(d["true_locations"]),
                   np.asarray(d["true_orientations"], dtype=float).reshape(-1, 3),
                   d["amplitude_peak"], d["T"], d["min_separation"], d["snr_floor_db"],
                   d["noise_sigma"])


def bell_curve(T, amplitude):
    """Gaussian bump of width ``T/8`` peaking at sample ``T/2`` (samples numbered from 1)."""
    t = np.arange(1, T + 1)
    return amplitude * np.exp(-((t - T / 2) ** 2) / (2 * (T / 8) ** 2))


def random_orientations(n, rng) -> np.ndarray:
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _separated(grid, locations, min_separation):
    if len(locations) < 2:
        return True
    pts = grid.points[list(locations)]
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    return bool(np.all(d[np.triu_indices(len(locations), 1)] >= min_separation))


def _draw_locations(grid, n, rng, min_separation, fixed=(), max_draws=10_000):
    for _ in range(max_draws):
        cand = tuple(fixed) + tuple(int(r) for r in rng.choice(grid.n_points, n, replace=False))
        if len(set(cand)) == len(cand) and _separated(grid, cand, min_separation):
            return cand[len(fixed):]
    raise InfeasibleScenario(
        f"could not place {n} dipoles at >= {min_separation} m separation in {max_draws} draws")


def simulate_sources(grid: SourceGrid, n_dipoles, rng, **defaults) -> SimScenario:
    """Random separated locations and uniform orientations sharing one bell time course.

    ``defaults`` override the :class:`SimScenario` fields (amplitude, T,
    separation, SNR floor, noise level).
    """
    min_sep = defaults.get("min_separation", SimScenario.min_separation)
    locs = _draw_locations(grid, n_dipoles, rng, min_sep)
    return SimScenario(locs, random_orientations(n_dipoles, rng), **defaults)


def dipole_fields(scenario: SimScenario, leadfield: Leadfield) -> np.ndarray:
    """Per-dipole noise-free fields, shape ``(n_D, n_sensors, T)``."""
    if scenario.n_dipoles == 0:
        return np.zeros((0, leadfield.n_sensors, scenario.T))
    q = scenario.moments()
    return np.stack([field_of(leadfield, [r], q[d:d + 1])
                     for d, r in enumerate(scenario.true_locations)])


def dipole_snr_db(scenario: SimScenario, leadfield: Leadfield) -> np.ndarray:
    """``10 log10(mean power of each dipole's field / noise variance)``."""
    fields = dipole_fields(scenario, leadfield)
    power = np.mean(fields**2, axis=(1, 2))
    if scenario.noise_sigma == 0:
        return np.full(power.shape, np.inf)
    return 10 * np.log10(power / scenario.noise_sigma**2)


def synth_data(scenario: SimScenario, leadfield: Leadfield, rng):
    """Return ``(clean, noisy, snr_db)``; data are ``(n_sensors, T)``."""
    if scenario.n_dipoles == 0:
        clean = np.zeros((leadfield.n_sensors, scenario.T))
    else:
        clean = field_of(leadfield, scenario.true_locations, scenario.moments())
    noisy = clean + scenario.noise_sigma * rng.standard_normal(clean.shape)
    return clean, noisy, dipole_snr_db(scenario, leadfield)


def enforce_snr(scenario: SimScenario, leadfield: Leadfield, grid: SourceGrid, rng,
                max_rounds=1000) -> SimScenario:
    """Replace dipoles below the SNR floor by new random ones until all pass."""
    for _ in range(max_rounds):
        snr = dipole_snr_db(scenario, leadfield)
        low = np.flatnonzero(snr < scenario.snr_floor_db)
        if low.size == 0:
            return scenario
        keep = [d for d in range(scenario.n_dipoles) if d not in set(low.tolist())]
        kept = tuple(scenario.true_locations[d] for d in keep)
        fresh = _draw_locations(grid, low.size, rng, scenario.min_separation, fixed=kept)
        locs = list(scenario.true_locations)
        orient = np.array(scenario.true_orientations, dtype=float)
        new_orient = random_orientations(low.size, rng)
        for i, d in enumerate(low):
            locs[d] = fresh[i]
            orient[d] = new_orient[i]
        scenario = replace(scenario, true_locations=tuple(locs), true_orientations=orient)
    raise InfeasibleScenario(f"SNR floor not met after {max_rounds} replacement rounds")


def estimate_noise_sigma(y) -> float:
    """Noise level set to 20% of the largest absolute data value."""
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("empty data")
    peak = np.max(np.abs(y))
    if peak == 0:
        raise ValueError("cannot estimate the noise level of all-zero data")
    return 0.2 * float(peak)


def peak_window(y, length=20, start=None):
    """Window of ``length`` samples centered on the peak sensor norm, or starting at ``start``.

    Returns the ``(start, stop)`` sample range, clipped to the data.
    """
    T = y.shape[1]
    length = min(length, T)
    if start is None:
        peak = int(np.argmax(np.linalg.norm(y, axis=0)))
        start = peak - length // 2
    start = int(min(max(start, 0), T - length))
    return start, start + length


def scenario_json(scenario, grid, snr_db):
    d = scenario.to_json(grid)
    d["snr_db"] = [float(s) for s in snr_db]
    return json.dumps(d, indent=2, sort_keys=True)
