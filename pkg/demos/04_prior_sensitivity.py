"""
Sensitivity to the prior scale factor
=====================================

A reduced version of the comparison harness: ten datasets per true
dipole number, both methods, k in {0.1, 1, 10}. The report directory
holds confusion matrices, OSPA, post_var and sigma_q estimates.
"""

import os
import tempfile

import numpy as np

from hsesame import evaluation as ev
from hsesame.cli import GEOMETRY_DEFAULTS, build_geometry
from hsesame.sampler import SamplerConfig
from hsesame.simulate import enforce_snr, simulate_sources, synth_data

sim, lf_sim, inf, lf_inf = build_geometry(GEOMETRY_DEFAULTS)
rng = np.random.default_rng(123)
datasets = []
for tnd in (1, 2):
    for i in range(10):
        sc = enforce_snr(simulate_sources(sim, tnd, rng, noise_sigma=2e-13), lf_sim, sim, rng)
        datasets.append(ev.Dataset(f"{tnd}_{i}", synth_data(sc, lf_sim, rng)[1], tnd,
                                   sim.points[list(sc.true_locations)]))

# cells run in parallel when HSESAME_WORKERS > 1; results do not change
matrix = ev.compare_methods(datasets, inf, lf_inf, 2e-7, SamplerConfig(n_particles=100),
                            master_seed=7)
out = tempfile.mkdtemp(prefix="hsesame_report_")
summary = ev.write_report(matrix, out)

print(f"{'setting':14s} {'accuracy':>8s} {'median OSPA':>12s} {'median sigma_q':>15s}")
for key, v in summary["settings"].items():
    print(f"{key:14s} {v['accuracy']:8.2f} {v['median_ospa']:12.4f} {v['median_sigma_q']:15.3g}")
print("median post_var  sesame:", round(summary["median_post_var_sesame"], 4),
      " h-sesame:", round(summary["median_post_var_h-sesame"], 4))
print("report files in", out, ":", sorted(os.listdir(out)))
