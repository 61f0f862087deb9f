"""
Checking the sampler against an enumerated posterior
====================================================

On an 8-point grid with at most two dipoles the posterior over dipole
sets can be written down exactly. Compare it with a 4000-particle run.
"""

import itertools

import numpy as np

from hsesame.forward import make_leadfield
from hsesame.model import DipoleConfigState, NoiseModel, PriorConfig, log_marginal_likelihood, log_prior
from hsesame.sampler import SamplerConfig, run
from hsesame.source_space import build_grid

rng = np.random.default_rng(1)
pts = np.c_[np.arange(8) * 0.01, 0.002 * (np.arange(8) % 2), np.zeros(8)]
grid = build_grid(pts, neighbor_radius=0.021, proposal_scale=0.01)
base = rng.standard_normal((6, 27))
lf = make_leadfield(0.6 * base[:, :-3] + 0.8 * base[:, 3:], grid)
y = lf.block(4) @ rng.standard_normal((3, 3)) + 2.0 * rng.standard_normal((6, 3))
noise = NoiseModel(2.0)
prior = PriorConfig.fixed(1.0, poisson_mean=0.25, n_dipoles_max=2)

# enumerate ordered configurations, then fold onto unordered sets
exact = {}
for n in range(3):
    for locs in itertools.permutations(range(8), n):
        cfg = DipoleConfigState(locs, 1.0)
        lp = log_marginal_likelihood(y, cfg, lf, noise) + log_prior(cfg, grid, prior)
        exact[frozenset(locs)] = exact.get(frozenset(locs), 0.0) + np.exp(lp)
z = sum(exact.values())
exact = {k: v / z for k, v in exact.items()}

state = run(y, lf, grid, prior, noise, SamplerConfig(n_particles=4000, rng_seed=0))
smc = {}
pop = state.population
for p in range(pop.size):
    key = frozenset(pop.locations[p, :pop.n_dipoles[p]].tolist())
    smc[key] = smc.get(key, 0.0) + state.weights[p]

print(f"{'set':>10s} {'exact':>8s} {'SMC':>8s}")
for key in sorted(exact, key=exact.get, reverse=True)[:8]:
    print(f"{str(sorted(key)):>10s} {exact[key]:8.4f} {smc.get(key, 0.0):8.4f}")
tv = 0.5 * sum(abs(exact.get(k, 0) - smc.get(k, 0)) for k in set(exact) | set(smc))
print("total variation distance:", round(tv, 4))
