"""Point estimates and posterior summaries from a final particle population."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import DipoleConfigState, NoiseModel, PriorConfig, moment_posterior
from .sampler import SmcState
from .source_space import SourceGrid

log = logging.getLogger(__name__)

DEFAULT_EXCLUSION_RADIUS = 0.02
SIGMA_SAMPLE_CAP = 10_000


@dataclass
class PosteriorSummary:
    n_dipoles_posterior: np.ndarray
    est_n_dipoles: int
    probability_map: np.ndarray
    est_locations: list
    moment_timecourses: Optional[np.ndarray]
    sigma_q_sample: tuple
    est_sigma_q: float
    peaks_incomplete: bool = False
    meta: dict = field(default_factory=dict)

    def to_json(self, grid: SourceGrid = None) -> dict:
        values, weights = self.sigma_q_sample
        out = {
            "n_dipoles_posterior": self.n_dipoles_posterior.tolist(),
            "est_n_dipoles": int(self.est_n_dipoles),
            "est_locations": [int(r) for r in self.est_locations],
            "peaks_incomplete": bool(self.peaks_incomplete),
            "est_sigma_q": float(self.est_sigma_q),
            "sigma_q_sample": {"values": np.asarray(values)[:SIGMA_SAMPLE_CAP].tolist(),
                               "weights": np.asarray(weights)[:SIGMA_SAMPLE_CAP].tolist()},
            "probability_map": self.probability_map.tolist(),
            "meta": self.meta,
        }
        if grid is not None:
            out["est_coordinates"] = grid.points[list(self.est_locations)].tolist()
        return out

    def write(self, path, grid=None):
        with open(path, "w") as fh:
            json.dump(self.to_json(grid), fh, indent=2, sort_keys=True)


def estimate_n_dipoles(state: SmcState, n_max=None):
    """Weighted posterior of the dipole count and its argmax (ties go to the smaller count)."""
    n_dip = state.population.n_dipoles
    n_max = int(n_dip.max()) if n_max is None else n_max
    post = np.bincount(n_dip, weights=state.weights, minlength=n_max + 1)
    post = post / post.sum()
    return post, int(np.argmax(post))


def probability_map(state: SmcState, est_n_dipoles: int, n_points: int) -> np.ndarray:
    """Weighted count of dipoles per grid point among particles with ``est_n_dipoles`` dipoles.

    Not renormalized: the map sums to ``est_n_dipoles`` times the posterior
    mass of that count.
    """
    pop = state.population
    sel = pop.n_dipoles == est_n_dipoles
    if not np.any(state.weights[sel] > 0):
        raise ValueError(f"no posterior mass at n_D = {est_n_dipoles}")
    locs = pop.locations[sel, :est_n_dipoles]
    w = np.repeat(state.weights[sel], est_n_dipoles)
    return np.bincount(locs.ravel(), weights=w, minlength=n_points)


def extract_peaks(pmap, est_n_dipoles, grid: SourceGrid,
                  exclusion_radius=DEFAULT_EXCLUSION_RADIUS):
    """Greedy peak picking with an exclusion radius.

    Returns ``(indices, incomplete)``; ``incomplete`` is True when the map
    ran out of mass before ``est_n_dipoles`` peaks were found.
    """
    remaining = np.array(pmap, dtype=float)
    peaks = []
    while len(peaks) < est_n_dipoles:
        best = int(np.argmax(remaining))  # argmax picks the lowest index on ties
        if remaining[best] <= 0:
            break
        peaks.append(best)
        near = np.linalg.norm(grid.points - grid.points[best], axis=1) <= exclusion_radius
        remaining[near] = 0.0
    return peaks, len(peaks) < est_n_dipoles


def moment_timecourses(locations, sigma_q, y, leadfield, noise: NoiseModel) -> np.ndarray:
    """Posterior mean moments, shape ``(n_D, 3, T)``, at a fixed configuration."""
    post = moment_posterior(y, DipoleConfigState(tuple(locations), sigma_q), leadfield, noise)
    return post.timecourses()


def weighted_median(values, weights) -> float:
    """Lower weighted median: smallest value whose cumulative weight reaches one half."""
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    i = np.searchsorted(cum, 0.5 * cum[-1] * (1 - 1e-12))
    return float(v[order][i])


def weighted_quantile(values, weights, q) -> float:
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    i = np.searchsorted(cum, q * cum[-1] * (1 - 1e-12))
    return float(v[order][min(i, v.size - 1)])


def estimate_sigma_q(state: SmcState, prior: PriorConfig = None):
    """Weighted sample of ``sigma_q`` and its weighted median."""
    if prior is not None and not prior.is_hyper:
        s = prior.sigma_q
        return (np.array([s]), np.array([1.0])), float(s)
    values = state.population.sigma_q
    return (values.copy(), state.weights.copy()), weighted_median(values, state.weights)


def summarize(state: SmcState, y, leadfield, grid: SourceGrid, prior: PriorConfig,
              noise: NoiseModel, exclusion_radius=DEFAULT_EXCLUSION_RADIUS) -> PosteriorSummary:
    """All point estimates for a completed run.

    In hyper mode the moment time courses are conditioned on the weighted
    median of ``sigma_q``.
    """
    post, n_hat = estimate_n_dipoles(state, prior.n_dipoles_max)
    pmap = probability_map(state, n_hat, grid.n_points)
    peaks, incomplete = extract_peaks(pmap, n_hat, grid, exclusion_radius)
    sample, sigma_hat = estimate_sigma_q(state, prior)
    courses = moment_timecourses(peaks, sigma_hat, y, leadfield, noise) if peaks else None
    if incomplete:
        log.warning("found %d of %d peaks in the probability map", len(peaks), n_hat)
    meta = {
        "sigma_q_for_timecourses": sigma_hat,
        "sigma_q_point_estimate": "weighted median" if prior.is_hyper else "fixed",
        "complete": bool(state.complete),
        "iterations": int(state.iteration),
    }
    return PosteriorSummary(post, n_hat, pmap, peaks, courses, sample, sigma_hat,
                            incomplete, meta)


def write_timecourses(path, courses):
    """CSV with one row per time sample and columns ``d{i}_x, d{i}_y, d{i}_z``."""
    courses = np.asarray(courses)
    n_d, _, T = courses.shape
    header = ",".join(f"d{i}_{c}" for i in range(n_d) for c in "xyz")
    np.savetxt(path, courses.reshape(3 * n_d, T).T, delimiter=",", header=header,
               comments="", fmt="%.17g")
