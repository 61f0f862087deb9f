"""Priors, marginal likelihood and the analytic moment posterior.

Dipole moments are Gaussian given the configuration, so they are
integrated out analytically and only ``(n_D, r, sigma_q)`` is sampled.
:func:`log_marginal_likelihood` and :func:`moment_posterior` evaluate the
closed forms through a Cholesky factorization of the data covariance
``sigma_q^2 G G^T + Gamma_N``. :class:`MarginalLikelihood` computes the
same quantity for whole particle populations through the equivalent
``3 n_D``-dimensional factorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import gammaln

from .forward import Leadfield
from .source_space import SourceGrid

LOG_2PI = math.log(2 * math.pi)


class FactorizationError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class PriorConfig:
    """Prior on the number of dipoles and on the moment prior width.

    Fixed mode (``sigma_q`` set) is plain SESAME; hyper mode
    (``sigma_min``/``sigma_max`` set) puts a log-uniform hyperprior on
    ``sigma_q``.
    """

    poisson_mean: float = 0.25
    n_dipoles_max: int = 10
    sigma_q: Optional[float] = None
    sigma_min: Optional[float] = None
    sigma_max: Optional[float] = None

    def __post_init__(self):
        if not self.poisson_mean > 0:
            raise ValueError("poisson_mean must be positive")
        if self.n_dipoles_max < 1:
            raise ValueError("n_dipoles_max must be at least 1")
        if self.sigma_q is not None:
            if self.sigma_min is not None or self.sigma_max is not None:
                raise ValueError("give either sigma_q (fixed) or sigma_min/sigma_max (hyper)")
            if not self.sigma_q > 0:
                raise ValueError("sigma_q must be positive")
        else:
            if self.sigma_min is None or self.sigma_max is None:
                raise ValueError("hyper mode needs both sigma_min and sigma_max")
            if not 0 < self.sigma_min < self.sigma_max:
                raise ValueError("hyper mode needs 0 < sigma_min < sigma_max")

    @classmethod
    def fixed(cls, sigma_q, poisson_mean=0.25, n_dipoles_max=10):
        return cls(poisson_mean, n_dipoles_max, sigma_q=sigma_q)

    @classmethod
    def hyper(cls, sigma_min, sigma_max, poisson_mean=0.25, n_dipoles_max=10):
        return cls(poisson_mean, n_dipoles_max, sigma_min=sigma_min, sigma_max=sigma_max)

    @property
    def is_hyper(self) -> bool:
        return self.sigma_q is None

    @property
    def log_sigma_range(self) -> float:
        return math.log(self.sigma_max / self.sigma_min)

    def truncated_poisson(self) -> np.ndarray:
        """Probabilities of ``n_D = 0 .. n_dipoles_max``."""
        k = np.arange(self.n_dipoles_max + 1)
        logp = k * math.log(self.poisson_mean) - self.poisson_mean - gammaln(k + 1)
        p = np.exp(logp - logp.max())
        return p / p.sum()


@dataclass(frozen=True)
class NoiseModel:
    """Gaussian sensor noise, ``sigma_noise^2 I`` unless a full covariance is given."""

    sigma_noise: float = 1.0
    covariance: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.covariance is None:
            if not self.sigma_noise > 0:
                raise ValueError("sigma_noise must be positive")
        else:
            cov = np.asarray(self.covariance, dtype=float)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
                raise ValueError("noise covariance must be a symmetric square matrix")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise ValueError("noise covariance must be positive definite") from None

    def matrix(self, n_sensors) -> np.ndarray:
        if self.covariance is None:
            return self.sigma_noise**2 * np.eye(n_sensors)
        return np.asarray(self.covariance, dtype=float)

    def whiten(self, a):
        """Return ``(L^{-1} a, log det L)`` with ``Gamma_N = L L^T``."""
        a = np.asarray(a, dtype=float)
        if self.covariance is None:
            return a / self.sigma_noise, a.shape[0] * math.log(self.sigma_noise)
        chol = np.linalg.cholesky(np.asarray(self.covariance, dtype=float))
        return (linalg.solve_triangular(chol, a, lower=True),
                float(np.sum(np.log(np.diag(chol)))))


@dataclass(frozen=True)
class DipoleConfigState:
    locations: tuple = ()
    sigma_q: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "locations", tuple(int(r) for r in self.locations))

    @property
    def n_dipoles(self) -> int:
        return len(self.locations)


@dataclass(frozen=True)
class MomentPosterior:
    """Gaussian posterior of the dipole moments at every time sample.

    ``means[:, t]`` stacks the ``3 n_D`` moment components at time ``t``;
    ``covariance`` is shared by all time samples.
    """

    means: np.ndarray
    covariance: np.ndarray

    def timecourses(self) -> np.ndarray:
        """Means reshaped to ``(n_D, 3, T)``."""
        return self.means.reshape(-1, 3, self.means.shape[1])


def _as_topographies(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if not np.all(np.isfinite(y)):
        raise ValueError("data must be finite")
    return y


def _cho_factor_jittered(a):
    try:
        return linalg.cho_factor(a, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-12 * np.trace(a) / a.shape[0]
        try:
            return linalg.cho_factor(a + jitter * np.eye(a.shape[0]), lower=True)
        except linalg.LinAlgError:
            cond = np.linalg.cond(a)
            raise FactorizationError(
                f"data covariance not positive definite (condition estimate {cond:.3g})") from None


def _data_covariance(config, leadfield, noise):
    G = leadfield.columns(config.locations)
    return config.sigma_q**2 * G @ G.T + noise.matrix(leadfield.n_sensors), G


def log_marginal_likelihood(y, config: DipoleConfigState, leadfield: Leadfield,
                            noise: NoiseModel) -> float:
    """``sum_t log N(y_t; 0, sigma_q^2 G G^T + Gamma_N)``."""
    y = _as_topographies(y)
    cov, _ = _data_covariance(config, leadfield, noise)
    c, low = _cho_factor_jittered(cov)
    alpha = linalg.cho_solve((c, low), y)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    n_s, T = y.shape
    return float(-0.5 * (T * (n_s * LOG_2PI + logdet) + np.sum(y * alpha)))


def moment_posterior(y, config: DipoleConfigState, leadfield: Leadfield,
                     noise: NoiseModel) -> MomentPosterior:
    if config.n_dipoles < 1:
        raise ValueError("moment posterior needs at least one dipole")
    y = _as_topographies(y)
    cov, G = _data_covariance(config, leadfield, noise)
    factor = _cho_factor_jittered(cov)
    s2 = config.sigma_q**2
    means = s2 * G.T @ linalg.cho_solve(factor, y)
    post_cov = s2 * np.eye(G.shape[1]) - s2**2 * G.T @ linalg.cho_solve(factor, G)
    return MomentPosterior(means, 0.5 * (post_cov + post_cov.T))


def log_prior_arrays(n_dipoles, sigma_q, n_points: int, prior: PriorConfig) -> np.ndarray:
    """Vectorized :func:`log_prior` over counts and widths (locations assumed distinct)."""
    n = np.asarray(n_dipoles)
    sigma = np.asarray(sigma_q, dtype=float)
    lam = prior.poisson_mean
    # sum_{k<n} log(N - k) = lgamma(N + 1) - lgamma(N - n + 1)
    out = (n * math.log(lam) - lam - gammaln(n + 1)
           - (gammaln(n_points + 1) - gammaln(n_points - np.minimum(n, n_points) + 1)))
    out = np.where(n > prior.n_dipoles_max, -np.inf, out)
    if prior.is_hyper:
        inside = (sigma >= prior.sigma_min) & (sigma <= prior.sigma_max)
        with np.errstate(divide="ignore", invalid="ignore"):
            hyper = -np.log(sigma) - math.log(prior.log_sigma_range)
        out = out + np.where(inside, hyper, -np.inf)
    return out


def log_prior(config: DipoleConfigState, grid: SourceGrid, prior: PriorConfig) -> float:
    """Log prior of an ordered configuration of distinct locations.

    Poisson on the count, uniform over ordered distinct locations and, in
    hyper mode, the normalized log-uniform density on ``sigma_q``.
    Returns ``-inf`` outside the support.
    """
    if len(set(config.locations)) != config.n_dipoles:
        return -math.inf
    if any(not 0 <= r < grid.n_points for r in config.locations):
        return -math.inf
    return float(log_prior_arrays(config.n_dipoles, config.sigma_q, grid.n_points, prior))


def sample_sigma(prior: PriorConfig, rng, size=None):
    if not prior.is_hyper:
        return np.full(size, prior.sigma_q) if size is not None else prior.sigma_q
    u = rng.uniform(math.log(prior.sigma_min), math.log(prior.sigma_max), size=size)
    return np.exp(u)


def sample_prior_arrays(n_samples, grid: SourceGrid, prior: PriorConfig, rng):
    """Draw ``n_samples`` prior configurations as padded arrays.

    Returns ``(locations, n_dipoles, sigma_q)`` where ``locations`` has shape
    ``(n_samples, n_dipoles_max)`` and unused slots hold ``-1``.
    """
    nmax = prior.n_dipoles_max
    n_dip = rng.choice(nmax + 1, size=n_samples, p=prior.truncated_poisson())
    n_dip = np.minimum(n_dip, grid.n_points)
    keys = rng.random((n_samples, grid.n_points))
    order = np.argsort(keys, axis=1)[:, :nmax]
    locs = np.where(np.arange(nmax) < n_dip[:, None], order, -1)
    sigma = sample_sigma(prior, rng, size=n_samples)
    return locs.astype(np.intp), n_dip.astype(np.intp), np.asarray(sigma, dtype=float)


def sample_prior(grid: SourceGrid, prior: PriorConfig, rng) -> DipoleConfigState:
    locs, n_dip, sigma = sample_prior_arrays(1, grid, prior, rng)
    return DipoleConfigState(tuple(locs[0, :n_dip[0]]), float(sigma[0]))


class MarginalLikelihood:
    """Batched log marginal likelihood for particle populations.

    After whitening by the noise covariance, with ``C = I + sigma_q^2 G^T G``
    (size ``3 n_D``)::

        log det Gamma_l = log det C  (+ noise term)
        y^T Gamma_l^{-1} y = y^T y - sigma_q^2 |chol(C)^{-1} G^T y|^2

    ``G^T G`` and ``G^T y`` are precomputed once per dataset.
    """

    precompute_limit = 4500

    def __init__(self, y, leadfield: Leadfield, noise: NoiseModel):
        y = _as_topographies(y)
        if y.shape[0] != leadfield.n_sensors:
            raise ValueError(f"data have {y.shape[0]} sensors, leadfield has {leadfield.n_sensors}")
        self.n_sensors, self.T = y.shape
        yw, logdet_l = noise.whiten(y)
        Gw, _ = noise.whiten(leadfield.matrix)
        self._Gw = Gw
        self.yy = float(np.sum(yw**2))
        self.GtY = Gw.T @ yw
        self.GtG = Gw.T @ Gw if Gw.shape[1] <= self.precompute_limit else None
        self.const = -0.5 * self.T * self.n_sensors * LOG_2PI - self.T * logdet_l
        self.n_evaluations = 0

    def _gram(self, cols):
        if self.GtG is not None:
            return self.GtG[cols[:, :, None], cols[:, None, :]]
        sub = self._Gw[:, cols]
        return np.einsum("sai,saj->aij", sub, sub)

    def __call__(self, locations, n_dipoles, sigma_q) -> np.ndarray:
        locs = np.atleast_2d(np.asarray(locations, dtype=np.intp))
        n_dip = np.atleast_1d(np.asarray(n_dipoles, dtype=np.intp))
        sigma = np.broadcast_to(np.asarray(sigma_q, dtype=float), n_dip.shape)
        self.n_evaluations += n_dip.size
        out = np.full(n_dip.shape, self.const - 0.5 * self.yy)
        for n in np.unique(n_dip):
            if n == 0:
                continue
            sel = np.flatnonzero(n_dip == n)
            cols = (3 * locs[sel, :n, None] + np.arange(3)).reshape(sel.size, 3 * n)
            s2 = sigma[sel, None, None] ** 2
            C = np.eye(3 * n) + s2 * self._gram(cols)
            chol = _batched_cholesky(C)
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
            W = np.linalg.solve(chol, self.GtY[cols])
            quad = self.yy - s2[:, 0, 0] * np.sum(W**2, axis=(1, 2))
            out[sel] = self.const - 0.5 * (self.T * logdet + quad)
        return out


def _batched_cholesky(C):
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(C, axis1=1, axis2=2)[:, None, None] / C.shape[1]
        try:
            return np.linalg.cholesky(C + jitter * np.eye(C.shape[1]))
        except np.linalg.LinAlgError:
            cond = np.max(np.linalg.cond(C))
            raise FactorizationError(
                f"moment-space covariance not positive definite (condition estimate {cond:.3g})"
            ) from None
