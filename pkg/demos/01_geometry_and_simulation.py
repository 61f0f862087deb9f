"""
Source grids, leadfields and simulated recordings
=================================================

Build a simulation grid and a distinct inference grid inside a ball,
a synthetic leadfield for 50 sensors, and a few two-dipole datasets that
respect the separation and SNR constraints.
"""

import numpy as np

from hsesame.forward import field_of, sphere_sensors, synth_leadfield
from hsesame.simulate import (dipole_snr_db, enforce_snr, estimate_noise_sigma, peak_window,
                              simulate_sources, synth_data)
from hsesame.source_space import build_grid, random_ball_grid, regular_ball_grid

rng = np.random.default_rng(0)

# an irregular grid for simulating and a regular lattice for inference,
# so the true dipoles never sit exactly on an inference point
sim = build_grid(random_ball_grid(400, 0.07, rng, min_distance=0.008))
inf = build_grid(regular_ball_grid(200, 0.07))
print("simulation grid:", sim.n_points, "points; inference grid:", inf.n_points, "points")
print("mean neighbors per inference point:", np.mean([len(n) for n in inf.neighbors]))

sensors = sphere_sensors(50, radius=0.12)
lf_sim = synth_leadfield(sim, sensors, seed=0)
lf_inf = synth_leadfield(inf, sensors, seed=0)
print("leadfield shape:", lf_inf.matrix.shape)

# fields fall off with distance: compare a deep and a shallow point
deep = int(np.argmin(np.linalg.norm(inf.points, axis=1)))
shallow = int(np.argmax(inf.points[:, 2]))
for name, r in (("deep", deep), ("shallow", shallow)):
    print(f"{name:8s} |field| of a unit x-dipole:", np.linalg.norm(field_of(lf_inf, [r], [[1, 0, 0]])))

# two dipoles with a common bell-shaped time course, redrawn until both
# clear the 3 dB floor
for i in range(3):
    sc = simulate_sources(sim, 2, rng, noise_sigma=2e-13)
    sc = enforce_snr(sc, lf_sim, sim, rng)
    clean, noisy, snr = synth_data(sc, lf_sim, rng)
    a, b = peak_window(noisy, 20)
    print(f"dataset {i}: SNR per dipole {np.round(snr, 1)} dB, window {a}-{b}, "
          f"20% rule noise {estimate_noise_sigma(noisy[:, a:b]):.2e} (true 2e-13)")

print("separation (m):", np.linalg.norm(np.subtract(*sim.points[list(sc.true_locations)])))
print("SNR recomputed:", dipole_snr_db(sc, lf_sim))
