import math

import numpy as np
import pytest
from scipy import integrate, stats

from hsesame.forward import make_leadfield, sphere_sensors, synth_leadfield
from hsesame.model import (DipoleConfigState, MarginalLikelihood, NoiseModel, PriorConfig,
                           log_marginal_likelihood, log_prior, moment_posterior, sample_prior,
                           sample_prior_arrays)
from hsesame.source_space import build_grid, regular_ball_grid


def scalar_problem():
    grid = build_grid([[0, 0, 0], [0.01, 0, 0]])
    G = np.array([[1.0, 0, 0, 0.3, 0.2, 0.1]])
    return grid, make_leadfield(G, grid)


def random_problem(rng, n_sensors=3, n_points=4):
    grid = build_grid(rng.uniform(-1, 1, size=(n_points, 3)), 0.5, 0.2)
    return grid, make_leadfield(rng.standard_normal((n_sensors, 3 * n_points)), grid)


def information_form_mean(y, G, sigma_q, noise_cov):
    Ninv = np.linalg.inv(noise_cov)
    precision = G.T @ Ninv @ G + np.eye(G.shape[1]) / sigma_q**2
    return np.linalg.solve(precision, G.T @ Ninv @ y)


def test_empty_configuration_is_noise_only_density():
    rng = np.random.default_rng(1)
    grid, lf = random_problem(rng, 5)
    y = rng.standard_normal((5, 3))
    noise = NoiseModel(0.7)
    expected = stats.multivariate_normal(np.zeros(5), 0.49 * np.eye(5)).logpdf(y.T).sum()
    got = log_marginal_likelihood(y, DipoleConfigState((), 2.0), lf, noise)
    assert got == pytest.approx(expected, rel=1e-13)


def test_scalar_marginal_likelihood_by_hand():
    _, lf = scalar_problem()
    got = log_marginal_likelihood([0.0], DipoleConfigState((0,), 1.0), lf, NoiseModel(1.0))
    assert got == pytest.approx(-0.5 * math.log(4 * math.pi), rel=1e-15)


def test_scalar_moment_posterior_by_hand():
    _, lf = scalar_problem()
    post = moment_posterior([1.0], DipoleConfigState((0,), 1.0), lf, NoiseModel(1.0))
    np.testing.assert_allclose(post.means[:, 0], [0.5, 0, 0], atol=1e-15)
    np.testing.assert_allclose(post.covariance, np.diag([0.5, 1, 1]), atol=1e-15)


def test_zero_data_gives_zero_means():
    rng = np.random.default_rng(2)
    _, lf = random_problem(rng, 6)
    post = moment_posterior(np.zeros((6, 4)), DipoleConfigState((1, 3), 0.8), lf, NoiseModel(0.5))
    assert np.all(post.means == 0)


def test_marginal_likelihood_matches_monte_carlo_integration():
    rng = np.random.default_rng(3)
    _, lf = random_problem(rng, 3, 2)
    cfg = DipoleConfigState((1,), 0.9)
    noise = NoiseModel(1.1)
    y = rng.standard_normal(3)
    q = rng.normal(0, cfg.sigma_q, size=(10**6, 3))
    mean = (lf.block(1) @ q.T).T
    lik = stats.multivariate_normal(np.zeros(3), noise.matrix(3)).pdf(y - mean)
    se = lik.std(ddof=1) / math.sqrt(lik.size)
    exact = math.exp(log_marginal_likelihood(y, cfg, lf, noise))
    assert abs(lik.mean() - exact) < 3 * se


def test_mean_matches_information_form_on_random_instances():
    rng = np.random.default_rng(4)
    for _ in range(100):
        n_s = int(rng.integers(3, 9))
        grid, lf = random_problem(rng, n_s, 5)
        n_d = int(rng.integers(1, 4))
        locs = tuple(rng.choice(5, n_d, replace=False))
        sigma_q = float(np.exp(rng.uniform(-1, 1)))
        noise = NoiseModel(float(np.exp(rng.uniform(-1, 0.5))))
        y = rng.standard_normal((n_s, 3))
        post = moment_posterior(y, DipoleConfigState(locs, sigma_q), lf, noise)
        oracle = information_form_mean(y, lf.columns(locs), sigma_q, noise.matrix(n_s))
        np.testing.assert_allclose(post.means, oracle, rtol=1e-10, atol=1e-12 * np.abs(oracle).max())
        cov = post.covariance
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > -1e-12


def test_full_noise_covariance_equivalent_to_scaled_identity():
    rng = np.random.default_rng(5)
    _, lf = random_problem(rng, 4)
    y = rng.standard_normal((4, 2))
    cfg = DipoleConfigState((0, 2), 1.3)
    a = log_marginal_likelihood(y, cfg, lf, NoiseModel(0.6))
    b = log_marginal_likelihood(y, cfg, lf, NoiseModel(covariance=0.36 * np.eye(4)))
    assert a == pytest.approx(b, rel=1e-13)


def test_noise_covariance_validation():
    with pytest.raises(ValueError, match="symmetric"):
        NoiseModel(covariance=np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError, match="positive definite"):
        NoiseModel(covariance=np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_vanishing_prior_width_recovers_empty_model():
    rng = np.random.default_rng(6)
    _, lf = random_problem(rng, 6)
    y = rng.standard_normal((6, 3))
    noise = NoiseModel(0.9)
    empty = log_marginal_likelihood(y, DipoleConfigState((), 1.0), lf, noise)
    tiny = log_marginal_likelihood(y, DipoleConfigState((1, 2), 1e-12), lf, noise)
    assert abs(tiny - empty) < 1e-8


def test_batched_likelihood_matches_direct():
    rng = np.random.default_rng(7)
    grid = build_grid(regular_ball_grid(40, 0.05))
    lf = synth_leadfield(grid, sphere_sensors(12), seed=2)
    y = rng.standard_normal((12, 5)) * 1e-12
    for noise in (NoiseModel(4e-13), NoiseModel(covariance=np.diag(rng.uniform(1, 3, 12)) * 1e-25)):
        ml = MarginalLikelihood(y, lf, noise)
        locs, n_dip, sigma = sample_prior_arrays(
            200, grid, PriorConfig.hyper(1e-9, 1e-6, poisson_mean=1.5, n_dipoles_max=4), rng)
        batched = ml(locs, n_dip, sigma)
        for p in range(0, 200, 7):
            cfg = DipoleConfigState(tuple(locs[p, :n_dip[p]]), sigma[p])
            assert batched[p] == pytest.approx(log_marginal_likelihood(y, cfg, lf, noise), rel=1e-10)


def test_batched_likelihood_without_precomputed_gram(monkeypatch):
    rng = np.random.default_rng(8)
    grid, lf = random_problem(rng, 5, 6)
    y = rng.standard_normal((5, 2))
    full = MarginalLikelihood(y, lf, NoiseModel(1.0))
    monkeypatch.setattr(MarginalLikelihood, "precompute_limit", 0)
    lazy = MarginalLikelihood(y, lf, NoiseModel(1.0))
    assert lazy.GtG is None
    locs = np.array([[0, 3, -1], [5, 1, 2]])
    np.testing.assert_allclose(lazy(locs, [2, 3], [0.5, 2.0]), full(locs, [2, 3], [0.5, 2.0]),
                               rtol=1e-13)


def test_data_covariance_positive_definite_for_any_width():
    rng = np.random.default_rng(9)
    _, lf = random_problem(rng, 4, 5)
    G = lf.columns([0, 1, 2, 3])
    for s in (0.0, 1e-6, 1.0, 1e6):
        cov = s**2 * G @ G.T + 0.01 * np.eye(4)
        np.testing.assert_allclose(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > 0


# --- prior -----------------------------------------------------------------

def test_log_prior_hand_value():
    grid = build_grid(np.arange(30.0).reshape(10, 3))
    prior = PriorConfig.fixed(1.0, poisson_mean=0.25)
    expected = math.log(math.exp(-0.25) * 0.25**2 / 2 / 10 / 9)
    assert log_prior(DipoleConfigState((3, 7), 1.0), grid, prior) == pytest.approx(expected, rel=1e-14)


def test_log_prior_empty_configuration():
    grid = build_grid(np.arange(15).reshape(5, 3))
    assert log_prior(DipoleConfigState((), 1.0), grid, PriorConfig.fixed(1.0, 0.4)) == pytest.approx(-0.4)


def test_log_prior_out_of_support():
    grid = build_grid(np.arange(15.0).reshape(5, 3))
    hyper = PriorConfig.hyper(1.0, 10.0, n_dipoles_max=2)
    assert log_prior(DipoleConfigState((1,), 10.0 * 1.01), grid, hyper) == -math.inf
    assert log_prior(DipoleConfigState((1,), 0.99), grid, hyper) == -math.inf
    assert log_prior(DipoleConfigState((1, 1), 2.0), grid, hyper) == -math.inf
    assert log_prior(DipoleConfigState((0, 1, 2), 2.0), grid, hyper) == -math.inf


def test_hyperprior_density_integrates_to_one():
    grid = build_grid(np.arange(15.0).reshape(5, 3))
    prior = PriorConfig.hyper(2e-9, 2e-6, poisson_mean=0.3)
    base = log_prior(DipoleConfigState((), 1.0), grid, PriorConfig.fixed(1.0, 0.3))

    def density(s):
        return math.exp(log_prior(DipoleConfigState((), s), grid, prior) - base)

    # integrate in log-space to keep the quadrature well conditioned
    total, _ = integrate.quad(lambda u: density(math.exp(u)) * math.exp(u),
                              math.log(2e-9), math.log(2e-6), epsabs=1e-12)
    assert abs(total - 1) < 1e-8


def test_prior_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(sigma_q=None, sigma_min=1.0)
    with pytest.raises(ValueError):
        PriorConfig.hyper(2.0, 1.0)
    with pytest.raises(ValueError):
        PriorConfig(sigma_q=1.0, sigma_min=0.1, sigma_max=1.0)
    with pytest.raises(ValueError):
        PriorConfig.fixed(1.0, poisson_mean=0)


def test_prior_count_distribution():
    grid = build_grid(regular_ball_grid(30, 0.05))
    prior = PriorConfig.fixed(1.0, poisson_mean=0.25, n_dipoles_max=3)
    _, n_dip, sigma = sample_prior_arrays(10**5, grid, prior, np.random.default_rng(10))
    k = np.arange(4)
    pmf = 0.25**k / np.array([1, 1, 2, 6])
    p0 = pmf[0] / pmf.sum()
    se = math.sqrt(p0 * (1 - p0) / 1e5)
    assert abs(np.mean(n_dip == 0) - p0) < 3 * se
    assert np.all(sigma == 1.0)


def test_prior_hyper_decades_equally_likely():
    grid = build_grid(regular_ball_grid(30, 0.05))
    prior = PriorConfig.hyper(1e-9, 1e-6)
    _, _, sigma = sample_prior_arrays(10**5, grid, prior, np.random.default_rng(11))
    counts = np.histogram(np.log10(sigma), bins=[-9, -8, -7, -6])[0]
    se = math.sqrt((1 / 3) * (2 / 3) / 1e5)
    assert np.all(np.abs(counts / 1e5 - 1 / 3) < 3 * se)


def test_prior_locations_distinct_and_valid():
    grid = build_grid(regular_ball_grid(30, 0.05))
    prior = PriorConfig.fixed(1.0, poisson_mean=3.0, n_dipoles_max=6)
    rng = np.random.default_rng(12)
    for _ in range(200):
        cfg = sample_prior(grid, prior, rng)
        assert len(set(cfg.locations)) == cfg.n_dipoles <= 6
        assert all(0 <= r < grid.n_points for r in cfg.locations)
        assert np.isfinite(log_prior(cfg, grid, prior))
