"""Performance metrics and the SESAME vs h-SESAME comparison harness."""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import estimates
from .model import NoiseModel, PriorConfig
from .sampler import SamplerConfig, run
from .simulate import estimate_noise_sigma, peak_window

log = logging.getLogger(__name__)

METHODS = ("sesame", "h-sesame")
K_VALUES = (0.1, 1.0, 10.0)
SIGMA_MIN_DIVISOR = 35.0
SIGMA_RANGE = 1e3
WORKERS_ENV = "HSESAME_WORKERS"


def ospa(est_coords, true_coords):
    """Sum of distances under the best injective matching of the smaller set into the larger.

    No penalty is charged for a cardinality mismatch. Returns
    ``(value, empty)`` where ``empty`` flags that one of the sets was empty
    (value 0).
    """
    a = np.asarray(est_coords, dtype=float).reshape(-1, 3)
    b = np.asarray(true_coords, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        return 0.0, True
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum()), False


def confusion_matrix(true_counts, est_counts, size=None) -> np.ndarray:
    """Counts of (true, estimated) dipole numbers; rows are the true number."""
    t = np.asarray(true_counts, dtype=int)
    e = np.asarray(est_counts, dtype=int)
    if size is None:
        size = int(max(t.max(initial=0), e.max(initial=0))) + 1
    m = np.zeros((size, size), dtype=int)
    np.add.at(m, (t, e), 1)
    return m


def posterior_map_variance(maps, cell_volume=1.0) -> float:
    """Sum over ordered pairs of settings of the gridded squared map difference."""
    maps = [np.asarray(m, dtype=float) for m in maps]
    if len({m.shape for m in maps}) > 1:
        raise ValueError("probability maps live on different grids")
    total = 0.0
    for i, mi in enumerate(maps):
        for j, mj in enumerate(maps):
            if i != j:
                total += cell_volume * float(np.sum((mi - mj) ** 2))
    return total


def setting_prior(method, k, base_sigma, poisson_mean=0.25, n_dipoles_max=10) -> PriorConfig:
    """Prior for one harness cell: ``sigma_q = k*base`` or ``sigma_min = k*base/35``."""
    if method == "sesame":
        return PriorConfig.fixed(base_sigma * k, poisson_mean, n_dipoles_max)
    if method == "h-sesame":
        smin = base_sigma * k / SIGMA_MIN_DIVISOR
        return PriorConfig.hyper(smin, SIGMA_RANGE * smin, poisson_mean, n_dipoles_max)
    raise ValueError(f"unknown method {method!r}")


@dataclass
class Dataset:
    """One localization problem with its ground truth (in coordinates)."""

    id: str
    data: np.ndarray
    true_n_dipoles: int
    true_coordinates: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class CellResult:
    dataset: str
    method: str
    k: float
    true_n_dipoles: int
    summary: estimates.PosteriorSummary = None
    ospa: float = float("nan")
    error: str = ""

    @property
    def failed(self) -> bool:
        return bool(self.error)


@dataclass
class RunMatrix:
    datasets: list
    settings: list
    results: dict


def cell_seed(master_seed, i_dataset, i_setting) -> int:
    ss = np.random.SeedSequence([int(master_seed), i_dataset, i_setting])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _run_cell(args):
    (dataset, method, k, seed, grid, leadfield, base_sigma, sampler_cfg, prior_kw,
     window_len, exclusion_radius) = args
    try:
        y = dataset.data
        if window_len and y.shape[1] > window_len:
            a, b = peak_window(y, window_len)
            y = y[:, a:b]
        noise = NoiseModel(estimate_noise_sigma(y))
        prior = setting_prior(method, k, base_sigma, **prior_kw)
        cfg = SamplerConfig(**{**sampler_cfg.__dict__, "rng_seed": seed})
        state = run(y, leadfield, grid, prior, noise, cfg)
        summary = estimates.summarize(state, y, leadfield, grid, prior, noise, exclusion_radius)
        value, _ = ospa(grid.points[summary.est_locations], dataset.true_coordinates)
        return CellResult(dataset.id, method, k, dataset.true_n_dipoles, summary, value)
    except Exception as exc:  # a failed cell must not stop the harness
        log.exception("cell %s/%s/%s failed", dataset.id, method, k)
        return CellResult(dataset.id, method, k, dataset.true_n_dipoles,
                          error=f"{type(exc).__name__}: {exc}")


def compare_methods(datasets, grid, leadfield, base_sigma=2e-7, sampler_config=None,
                    master_seed=0, methods=METHODS, k_values=K_VALUES, workers=None,
                    prior_kw=None, window_len=20,
                    exclusion_radius=estimates.DEFAULT_EXCLUSION_RADIUS) -> RunMatrix:
    """Run every (method, k) setting on every dataset.

    Cell seeds derive from ``master_seed`` and the cell position, so the
    result does not depend on ``workers`` (default: ``$HSESAME_WORKERS`` or 1).
    """
    sampler_config = sampler_config or SamplerConfig()
    prior_kw = prior_kw or {}
    settings = [(m, k) for m in methods for k in k_values]
    jobs = [(ds, m, k, cell_seed(master_seed, i, j), grid, leadfield, base_sigma,
             sampler_config, prior_kw, window_len, exclusion_radius)
            for i, ds in enumerate(datasets) for j, (m, k) in enumerate(settings)]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            cells = list(pool.map(_run_cell, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        cells = [_run_cell(job) for job in jobs]
    results = {(c.dataset, c.method, c.k): c for c in cells}
    return RunMatrix([ds.id for ds in datasets], settings, results)


def post_var_table(matrix: RunMatrix):
    """``post_var`` per dataset and method across the k settings.

    Each setting's map is evaluated at its own estimated dipole number.
    """
    rows = []
    for ds in matrix.datasets:
        for method in sorted({m for m, _ in matrix.settings}):
            cells = [matrix.results[(ds, m, k)] for m, k in matrix.settings if m == method]
            if any(c.failed for c in cells):
                continue
            value = posterior_map_variance([c.summary.probability_map for c in cells])
            rows.append({"dataset": ds, "method": method,
                         "true_n_dipoles": cells[0].true_n_dipoles, "post_var": value})
    return rows


def accuracy(matrix: RunMatrix, method, k):
    cells = [c for c in matrix.results.values() if c.method == method and c.k == k and not c.failed]
    if not cells:
        return float("nan")
    return float(np.mean([c.summary.est_n_dipoles == c.true_n_dipoles for c in cells]))


def write_report(matrix: RunMatrix, out_dir, n_max=None) -> dict:
    """Write confusion matrices, OSPA, post_var and sigma estimates; return the summary dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = [matrix.results[(ds, m, k)] for ds in matrix.datasets for m, k in matrix.settings]
    ok = [c for c in cells if not c.failed]
    if n_max is None:
        n_max = max([c.true_n_dipoles for c in ok] + [c.summary.est_n_dipoles for c in ok] + [0])
    summary = {"n_datasets": len(matrix.datasets), "n_cells": len(cells),
               "failed": [[c.dataset, c.method, c.k, c.error] for c in cells if c.failed],
               "settings": {}}

    for method, k in matrix.settings:
        sel = [c for c in ok if c.method == method and c.k == k]
        cm = confusion_matrix([c.true_n_dipoles for c in sel],
                              [c.summary.est_n_dipoles for c in sel], n_max + 1)
        np.savetxt(out / f"confusion_{method}_{k:g}.csv", cm, delimiter=",", fmt="%d")
        ospas = [c.ospa for c in sel]
        sig = [c.summary.est_sigma_q for c in sel]
        summary["settings"][f"{method}_{k:g}"] = {
            "confusion": cm.tolist(),
            "accuracy": accuracy(matrix, method, k),
            "median_ospa": float(np.median(ospas)) if ospas else None,
            "median_sigma_q": float(np.median(sig)) if sig else None,
        }

    with open(out / "ospa.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "k", "TND", "END", "value"])
        for c in ok:
            w.writerow([c.dataset, c.method, f"{c.k:g}", c.true_n_dipoles,
                        c.summary.est_n_dipoles, repr(c.ospa)])

    pv = post_var_table(matrix)
    with open(out / "post_var.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "TND", "post_var"])
        for r in pv:
            w.writerow([r["dataset"], r["method"], r["true_n_dipoles"], repr(r["post_var"])])
    for method in sorted({m for m, _ in matrix.settings}):
        vals = [r["post_var"] for r in pv if r["method"] == method]
        summary[f"median_post_var_{method}"] = float(np.median(vals)) if vals else None

    with open(out / "sigma_estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "method", "k", "TND", "est_sigma_q", "q25", "q75"])
        for c in ok:
            vals, wts = c.summary.sigma_q_sample
            w.writerow([c.dataset, c.method, f"{c.k:g}", c.true_n_dipoles,
                        repr(c.summary.est_sigma_q),
                        repr(estimates.weighted_quantile(vals, wts, 0.25)),
                        repr(estimates.weighted_quantile(vals, wts, 0.75))])

    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
