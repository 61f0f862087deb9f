"""Adaptive sequential Monte Carlo over dipole configurations.

The sampler targets the tempered family ``L(x)^alpha * prior(x)`` with
``alpha`` climbing adaptively from 0 to 1. Each particle is a configuration
``(n_D, r^{1:n_D}, sigma_q)``; moments are integrated out analytically.

Populations are stored as padded arrays so every kernel runs vectorized
over particles: ``locations[p, :n_dipoles[p]]`` are the occupied grid
indices of particle ``p`` and the remaining slots hold ``-1``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .model import (DipoleConfigState, MarginalLikelihood, PriorConfig,
                    log_prior_arrays, sample_prior_arrays)
from .source_space import SourceGrid

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    n_particles: int = 100
    ess_ratio_band: tuple = (0.9, 0.99)
    resample_threshold_fraction: float = 0.5
    min_iterations: int = 10
    max_iterations: int = 1000
    birth_prob: float = 1.0 / 3.0
    death_prob: float = 1.0 / 20.0
    gamma_shape: float = 3.0
    rng_seed: Optional[int] = 0

    def __post_init__(self):
        lo, hi = self.ess_ratio_band
        if not 0 < lo < hi < 1:
            raise ValueError("ess_ratio_band must satisfy 0 < low < high < 1")
        if not self.birth_prob + self.death_prob < 1:
            raise ValueError("birth_prob + death_prob must be below 1")
        if self.n_particles < 2:
            raise ValueError("need at least 2 particles")
        if not 1 <= self.min_iterations <= self.max_iterations:
            raise ValueError("need 1 <= min_iterations <= max_iterations")


@dataclass
class Population:
    """Padded particle configurations plus their cached log-likelihoods."""

    locations: np.ndarray
    n_dipoles: np.ndarray
    sigma_q: np.ndarray
    loglik: np.ndarray

    @property
    def size(self) -> int:
        return self.n_dipoles.size

    def copy(self) -> "Population":
        return Population(self.locations.copy(), self.n_dipoles.copy(),
                          self.sigma_q.copy(), self.loglik.copy())

    def take(self, idx) -> "Population":
        return Population(self.locations[idx], self.n_dipoles[idx],
                          self.sigma_q[idx], self.loglik[idx])

    def config(self, p) -> DipoleConfigState:
        n = int(self.n_dipoles[p])
        return DipoleConfigState(tuple(self.locations[p, :n]), float(self.sigma_q[p]))


@dataclass(frozen=True)
class Particle:
    config: DipoleConfigState
    log_weight: float


@dataclass
class SmcState:
    population: Population
    weights: np.ndarray
    alpha: float = 0.0
    iteration: int = 0
    alpha_history: List[float] = field(default_factory=lambda: [0.0])
    ess_history: List[float] = field(default_factory=list)
    ess_ratio_history: List[float] = field(default_factory=list)
    resample_flags: List[bool] = field(default_factory=list)
    clamp_flags: List[bool] = field(default_factory=list)
    acceptance_history: List[dict] = field(default_factory=list)
    complete: bool = False

    @property
    def n_particles(self) -> int:
        return self.population.size

    @property
    def particles(self) -> List[Particle]:
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return [Particle(self.population.config(p), float(logw[p]))
                for p in range(self.n_particles)]


def init_particles(n_particles, grid: SourceGrid, prior: PriorConfig, rng) -> SmcState:
    """Draw ``n_particles`` configurations from the prior with uniform weights.

    Log-likelihoods are left as NaN until the data are attached by :func:`run`.
    """
    if n_particles < 2:
        raise ValueError("need at least 2 particles")
    locs, n_dip, sigma = sample_prior_arrays(n_particles, grid, prior, rng)
    pop = Population(locs, n_dip, sigma, np.full(n_particles, np.nan))
    return SmcState(pop, np.full(n_particles, 1.0 / n_particles))


def ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    total = np.sum(w**2)
    if total == 0:
        raise ValueError("degenerate population: all weights are zero")
    return float(1.0 / total)


def reweight(weights, loglik, delta_alpha) -> np.ndarray:
    """Incremental tempering weights ``w * L^delta_alpha``, normalized."""
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(w) + delta_alpha * np.asarray(loglik, dtype=float)
    logw -= np.max(logw)
    new = np.exp(logw)
    return new / np.sum(new)


def adapt_alpha(weights, loglik, alpha, band=(0.9, 0.99), max_step=None,
                tol=1e-6, max_bisections=60):
    """Choose the next exponent so that ``ESS_next / ESS_now`` falls in ``band``.

    Returns ``(alpha_next, clamped)``; ``clamped`` is True when the step was
    cut by ``1 - alpha`` or ``max_step`` instead of being found by bisection.
    """
    if alpha >= 1.0:
        raise ValueError("alpha already reached 1")
    lo_band, hi_band = band
    ess_now = ess(weights)
    room = 1.0 - alpha
    cap = room if max_step is None else min(room, max_step)

    def ratio(delta):
        return ess(reweight(weights, loglik, delta)) / ess_now

    if ratio(cap) >= lo_band:
        return (1.0 if cap == room else alpha + cap), True
    lo, hi = 0.0, cap
    best = None
    for _ in range(max_bisections):
        mid = 0.5 * (lo + hi)
        r = ratio(mid)
        if lo_band <= r <= hi_band:
            best = mid
            break
        if r > hi_band:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    if best is None:
        best = lo if lo > 0 else hi
    return min(alpha + best, 1.0), False


def systematic_resample(weights, rng) -> np.ndarray:
    """Offspring indices from systematic resampling with one uniform draw."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    positions = (rng.random() + np.arange(n)) / n
    cum = np.cumsum(w)
    cum /= cum[-1]
    return np.minimum(np.searchsorted(cum, positions, side="right"), n - 1)


def _occupied(pop, p_idx, loc):
    """True where ``loc[i]`` is among the dipoles of particle ``p_idx[i]``."""
    return np.any(pop.locations[p_idx] == loc[:, None], axis=1)


def _nth_free(occupied_sorted, k):
    """Map rank ``k`` among unoccupied grid points to its grid index."""
    out = k.copy()
    for c in range(occupied_sorted.shape[1]):
        out += occupied_sorted[:, c] <= out
    return out


def rj_move(pop: Population, alpha, grid: SourceGrid, prior: PriorConfig,
            likelihood: MarginalLikelihood, rng, birth_prob=1 / 3, death_prob=1 / 20):
    """Reversible-jump birth/death move applied to every particle.

    A birth adds a uniformly drawn unoccupied point at a uniformly drawn
    slot; a death removes a uniformly drawn dipole. Returns the updated
    population and the boolean acceptance mask.
    """
    n_p = pop.size
    N = grid.n_points
    nmax = pop.locations.shape[1]
    u_kind, u_loc, u_slot, u_acc = rng.random((4, n_p))
    n = pop.n_dipoles
    birth = (u_kind < birth_prob) & (n < min(prior.n_dipoles_max, nmax, N))
    death = (u_kind >= birth_prob) & (u_kind < birth_prob + death_prob) & (n > 0)
    out = pop.copy()
    accepted = np.zeros(n_p, dtype=bool)
    slots = np.arange(nmax)

    b = np.flatnonzero(birth)
    if b.size:
        nb = n[b]
        occ = np.sort(np.where(slots < nb[:, None], pop.locations[b], N + 1), axis=1)
        new_loc = _nth_free(occ, np.floor(u_loc[b] * (N - nb)).astype(np.intp))
        slot = np.floor(u_slot[b] * (nb + 1)).astype(np.intp)
        old = pop.locations[b]
        shifted = np.concatenate([np.full((b.size, 1), -1), old[:, :-1]], axis=1)
        locs = np.where(slots < slot[:, None], old, shifted)
        locs[np.arange(b.size), slot] = new_loc
        ll = likelihood(locs, nb + 1, pop.sigma_q[b])
        # ordered-space proposal ratio: [P_d / (n+1)] / [P_b / ((N - n) (n+1))]
        log_ratio = (alpha * (ll - pop.loglik[b])
                     + log_prior_arrays(nb + 1, pop.sigma_q[b], N, prior)
                     - log_prior_arrays(nb, pop.sigma_q[b], N, prior)
                     + math.log(death_prob) + np.log(N - nb) - math.log(birth_prob))
        ok = np.log(u_acc[b]) < log_ratio
        idx = b[ok]
        out.locations[idx] = locs[ok]
        out.n_dipoles[idx] = nb[ok] + 1
        out.loglik[idx] = ll[ok]
        accepted[idx] = True

    d = np.flatnonzero(death)
    if d.size:
        nd = n[d]
        slot = np.floor(u_slot[d] * nd).astype(np.intp)
        old = pop.locations[d]
        shifted = np.concatenate([old[:, 1:], np.full((d.size, 1), -1)], axis=1)
        locs = np.where(slots < slot[:, None], old, shifted)
        ll = likelihood(locs, nd - 1, pop.sigma_q[d])
        log_ratio = (alpha * (ll - pop.loglik[d])
                     + log_prior_arrays(nd - 1, pop.sigma_q[d], N, prior)
                     - log_prior_arrays(nd, pop.sigma_q[d], N, prior)
                     + math.log(birth_prob) - np.log(N - nd + 1) - math.log(death_prob))
        ok = np.log(u_acc[d]) < log_ratio
        idx = d[ok]
        out.locations[idx] = locs[ok]
        out.n_dipoles[idx] = nd[ok] - 1
        out.loglik[idx] = ll[ok]
        accepted[idx] = True
    return out, accepted


def location_move(pop: Population, alpha, grid: SourceGrid,
                  likelihood: MarginalLikelihood, rng):
    """One Metropolis-Hastings update per dipole, sweeping the slots in order.

    Proposals come from the grid's neighbor kernel; moving onto an occupied
    point is rejected. Returns the updated population and the number of
    accepted single-dipole moves per particle.
    """
    out = pop.copy()
    nb_idx, nb_cum, nb_count = grid_tables(grid)
    n_accepted = np.zeros(pop.size, dtype=np.intp)
    for slot in range(pop.locations.shape[1]):
        u_prop, u_acc = rng.random((2, pop.size))
        p = np.flatnonzero(out.n_dipoles > slot)
        if p.size == 0:
            break
        src = out.locations[p, slot]
        movable = nb_count[src] > 0
        p, src, u_prop, u_acc = p[movable], src[movable], u_prop[p[movable]], u_acc[p[movable]]
        j = np.sum(nb_cum[src] < u_prop[:, None], axis=1)
        j = np.minimum(j, nb_count[src] - 1)
        dst = nb_idx[src, j]
        free = ~_occupied(out, p, dst)
        p, src, dst, u_acc = p[free], src[free], dst[free], u_acc[free]
        if p.size == 0:
            continue
        locs = out.locations[p].copy()
        locs[:, slot] = dst
        ll = likelihood(locs, out.n_dipoles[p], out.sigma_q[p])
        q_fwd = _proposal_mass(grid, src, dst)
        q_rev = _proposal_mass(grid, dst, src)
        log_ratio = alpha * (ll - out.loglik[p]) + np.log(q_rev) - np.log(q_fwd)
        ok = np.log(u_acc) < log_ratio
        idx = p[ok]
        out.locations[idx, slot] = dst[ok]
        out.loglik[idx] = ll[ok]
        n_accepted[idx] += 1
    return out, n_accepted


def _gamma_logpdf(x, shape, scale):
    return ((shape - 1) * np.log(x) - x / scale - shape * np.log(scale)
            - math.lgamma(shape))


def sigma_move(pop: Population, alpha, prior: PriorConfig,
               likelihood: MarginalLikelihood, rng, shape=3.0):
    """Metropolis-Hastings move on ``sigma_q`` with a Gamma proposal of mean ``sigma_q``.

    The proposal has shape ``k`` and scale ``sigma_q / k``; the Hastings
    ratio accounts for the scale depending on the conditioning value.
    No-op in fixed mode.
    """
    if not prior.is_hyper:
        return pop, np.zeros(pop.size, dtype=bool)
    out = pop.copy()
    sigma = pop.sigma_q
    proposal = rng.gamma(shape, sigma / shape)
    u_acc = rng.random(pop.size)
    inside = np.flatnonzero((proposal >= prior.sigma_min) & (proposal <= prior.sigma_max))
    accepted = np.zeros(pop.size, dtype=bool)
    if inside.size == 0:
        return out, accepted
    s_old, s_new = sigma[inside], proposal[inside]
    ll = likelihood(pop.locations[inside], pop.n_dipoles[inside], s_new)
    log_ratio = (alpha * (ll - pop.loglik[inside])
                 + np.log(s_old) - np.log(s_new)
                 + _gamma_logpdf(s_old, shape, s_new / shape)
                 - _gamma_logpdf(s_new, shape, s_old / shape))
    ok = np.log(u_acc[inside]) < log_ratio
    idx = inside[ok]
    out.sigma_q[idx] = s_new[ok]
    out.loglik[idx] = ll[ok]
    accepted[idx] = True
    return out, accepted


def mcmc_kernel(pop, alpha, grid, prior, likelihood, rng, config: SamplerConfig):
    """One application of the composed invariant kernel: RJ, then locations, then sigma."""
    pop, acc_rj = rj_move(pop, alpha, grid, prior, likelihood, rng,
                          config.birth_prob, config.death_prob)
    pop, acc_loc = location_move(pop, alpha, grid, likelihood, rng)
    pop, acc_sigma = sigma_move(pop, alpha, prior, likelihood, rng, config.gamma_shape)
    stats = {"rj": float(acc_rj.mean()), "location": float(acc_loc.sum()),
             "sigma": float(acc_sigma.mean())}
    return pop, stats


def grid_tables(grid: SourceGrid):
    """Padded neighbor indices, cumulative proposal masses and neighbor counts."""
    cached = grid.__dict__.get("_tables")
    if cached is not None:
        return cached
    counts = np.array([nb.size for nb in grid.neighbors], dtype=np.intp)
    width = max(1, int(counts.max()))
    idx = np.zeros((grid.n_points, width), dtype=np.intp)
    cum = np.full((grid.n_points, width), 2.0)
    P = grid.proposal
    for i, nb in enumerate(grid.neighbors):
        if nb.size:
            row = P.getrow(i)
            order = np.argsort(row.indices)
            idx[i, :nb.size] = row.indices[order]
            cum[i, :nb.size] = np.cumsum(row.data[order])
            cum[i, nb.size - 1] = 1.0
    tables = (idx, cum, counts)
    grid.__dict__["_tables"] = tables
    return tables


def _proposal_mass(grid, src, dst):
    return np.asarray(grid.proposal[src, dst]).ravel()


def run(y, leadfield, grid: SourceGrid, prior: PriorConfig, noise,
        config: SamplerConfig = None, diagnostics_path=None) -> SmcState:
    """Run the adaptive SMC sampler on data ``y`` of shape ``(n_sensors, T)``.

    Each iteration picks the next exponent by bisection on the ESS ratio,
    reweights, resamples when the ESS drops below the threshold and moves
    every particle with the invariant kernel. The returned state has
    ``complete=False`` if ``max_iterations`` ran out first.
    """
    config = config or SamplerConfig()
    if leadfield.n_points != grid.n_points:
        raise ValueError(f"leadfield covers {leadfield.n_points} points, grid has {grid.n_points}")
    if prior.n_dipoles_max > grid.n_points:
        raise ValueError("n_dipoles_max exceeds the number of grid points")
    rng = np.random.default_rng(config.rng_seed)
    likelihood = MarginalLikelihood(y, leadfield, noise)
    state = init_particles(config.n_particles, grid, prior, rng)
    pop = state.population
    pop.loglik = likelihood(pop.locations, pop.n_dipoles, pop.sigma_q)
    state.ess_history.append(ess(state.weights))
    n_p = config.n_particles

    while state.alpha < 1.0 and state.iteration < config.max_iterations:
        remaining = config.min_iterations - state.iteration
        max_step = (1.0 - state.alpha) / remaining if remaining > 1 else None
        alpha_next, clamped = adapt_alpha(state.weights, pop.loglik, state.alpha,
                                          config.ess_ratio_band, max_step)
        ess_before = ess(state.weights)
        weights = reweight(state.weights, pop.loglik, alpha_next - state.alpha)
        ess_after = ess(weights)
        resampled = ess_after < config.resample_threshold_fraction * n_p
        if resampled:
            pop = pop.take(systematic_resample(weights, rng))
            weights = np.full(n_p, 1.0 / n_p)
        pop, stats = mcmc_kernel(pop, alpha_next, grid, prior, likelihood, rng, config)

        state.alpha = alpha_next
        state.iteration += 1
        state.weights = weights
        state.alpha_history.append(alpha_next)
        state.ess_ratio_history.append(ess_after / ess_before)
        state.ess_history.append(ess(weights))
        state.resample_flags.append(bool(resampled))
        state.clamp_flags.append(bool(clamped))
        state.acceptance_history.append(stats)
        log.debug("iter %d alpha %.6g ess %.1f resampled %s", state.iteration,
                  alpha_next, state.ess_history[-1], resampled)

    state.population = pop
    state.complete = state.alpha >= 1.0
    if not state.complete:
        log.warning("sampler stopped at alpha=%.4g after %d iterations",
                    state.alpha, state.iteration)
    if diagnostics_path is not None:
        write_diagnostics(diagnostics_path, state)
    return state


def write_diagnostics(path, state: SmcState):
    """Per-iteration progress log as CSV."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "alpha", "ess", "ess_ratio", "resampled", "clamped",
                         "accept_rj", "accepted_location_moves", "accept_sigma"])
        for i in range(state.iteration):
            acc = state.acceptance_history[i]
            writer.writerow([i + 1, repr(state.alpha_history[i + 1]),
                             repr(state.ess_history[i + 1]), repr(state.ess_ratio_history[i]),
                             int(state.resample_flags[i]), int(state.clamp_flags[i]),
                             acc["rj"], acc["location"], acc["sigma"]])
