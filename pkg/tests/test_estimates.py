import json

import numpy as np
import pytest

from hsesame.estimates import (estimate_n_dipoles, estimate_sigma_q, extract_peaks,
                               moment_timecourses, probability_map, summarize, weighted_median,
                               weighted_quantile, write_timecourses)
from hsesame.forward import make_leadfield
from hsesame.model import NoiseModel, PriorConfig
from hsesame.sampler import Population, SmcState
from hsesame.source_space import build_grid


def make_state(configs, weights, sigma=None, width=3):
    n = len(configs)
    locs = np.full((n, width), -1)
    for p, c in enumerate(configs):
        locs[p, :len(c)] = c
    sigma = np.ones(n) if sigma is None else np.asarray(sigma, dtype=float)
    pop = Population(locs, np.array([len(c) for c in configs]), sigma, np.zeros(n))
    w = np.asarray(weights, dtype=float)
    return SmcState(pop, w / w.sum(), alpha=1.0, complete=True)


def line_grid(n=10, spacing=0.01):
    pts = np.zeros((n, 3))
    pts[:, 0] = np.arange(n) * spacing
    return build_grid(pts)


def test_count_point_mass():
    post, n_hat = estimate_n_dipoles(make_state([(1,), (2,), (3,)], [1, 1, 1]), 3)
    np.testing.assert_allclose(post, [0, 1, 0, 0])
    assert n_hat == 1


def test_count_tie_goes_to_smaller():
    _, n_hat = estimate_n_dipoles(make_state([(1,), (2, 3)], [0.5, 0.5]), 3)
    assert n_hat == 1


def test_count_hand_population():
    state = make_state([(), (4,), (1, 2), (5,)], [0.1, 0.2, 0.3, 0.4])
    post, n_hat = estimate_n_dipoles(state, 3)
    np.testing.assert_allclose(post, [0.1, 0.6, 0.3, 0.0], atol=1e-15)
    assert n_hat == 1


def test_map_single_particle():
    pmap = probability_map(make_state([(5,)], [1.0]), 1, 10)
    expected = np.zeros(10)
    expected[5] = 1
    np.testing.assert_array_equal(pmap, expected)


def test_map_two_dipoles():
    pmap = probability_map(make_state([(2, 7)], [1.0]), 2, 10)
    assert pmap[2] == pmap[7] == 1 and pmap.sum() == 2


def test_map_mixed_population_by_hand():
    state = make_state([(1,), (1,), (3,), (2, 4), (6,)], [0.1, 0.2, 0.3, 0.15, 0.25])
    pmap = probability_map(state, 1, 8)
    expected = np.zeros(8)
    expected[1], expected[3], expected[6] = 0.3, 0.3, 0.25
    np.testing.assert_allclose(pmap, expected, atol=1e-15)
    pmap2 = probability_map(state, 2, 8)
    assert pmap2[2] == pytest.approx(0.15) and pmap2[4] == pytest.approx(0.15)


def test_map_without_mass_raises():
    with pytest.raises(ValueError, match="no posterior mass"):
        probability_map(make_state([(1,)], [1.0]), 2, 5)


def test_peaks_point_mass():
    pmap = np.zeros(10)
    pmap[4] = 1
    assert extract_peaks(pmap, 1, line_grid()) == ([4], False)


def test_peaks_two_separated():
    pmap = np.zeros(10)
    pmap[[1, 8]] = 1
    assert extract_peaks(pmap, 2, line_grid()) == ([1, 8], False)


def test_peaks_too_close_flagged():
    pmap = np.zeros(10)
    pmap[3], pmap[4] = 0.9, 1.0
    peaks, incomplete = extract_peaks(pmap, 2, line_grid(), exclusion_radius=0.02)
    assert peaks == [4] and incomplete


def scalar_leadfield():
    grid = build_grid([[0, 0, 0], [0.01, 0, 0]])
    return make_leadfield(np.array([[1.0, 0, 0, 0.3, 0.2, 0.1]]), grid)


def test_timecourses_scalar_case():
    tc = moment_timecourses([0], 1.0, np.array([[1.0]]), scalar_leadfield(), NoiseModel(1.0))
    np.testing.assert_allclose(tc[0, :, 0], [0.5, 0, 0], atol=1e-15)


def test_timecourses_zero_and_linear():
    lf = scalar_leadfield()
    y = np.array([[0.3, -1.2, 2.0]])
    zero = moment_timecourses([0, 1], 0.7, np.zeros_like(y), lf, NoiseModel(1.0))
    assert np.all(zero == 0)
    a = moment_timecourses([0, 1], 0.7, y, lf, NoiseModel(1.0))
    b = moment_timecourses([0, 1], 0.7, 3.5 * y, lf, NoiseModel(1.0))
    np.testing.assert_allclose(b, 3.5 * a, rtol=1e-13)


def test_sigma_shared_value():
    state = make_state([(1,), (2,)], [0.3, 0.7], sigma=[2e-7, 2e-7])
    assert estimate_sigma_q(state)[1] == 2e-7


def test_sigma_lower_median_convention():
    state = make_state([(1,), (2,)], [0.5, 0.5], sigma=[1e-7, 3e-7])
    assert estimate_sigma_q(state)[1] == 1e-7


def test_sigma_hand_case():
    vals = [5.0, 1.0, 4.0, 2.0, 3.0]
    w = [0.1, 0.3, 0.25, 0.15, 0.2]
    # sorted: 1(.3) 2(.15) 3(.2) 4(.25) 5(.1); cumulative .3 .45 .65 -> median 3
    assert weighted_median(vals, w) == 3.0
    assert weighted_quantile(vals, w, 0.25) == 1.0
    assert weighted_quantile(vals, w, 0.75) == 4.0
    state = make_state([(1,)] * 5, w, sigma=vals)
    assert estimate_sigma_q(state)[1] == 3.0


def test_sigma_fixed_mode_returns_constant():
    state = make_state([(1,), (2,)], [0.5, 0.5], sigma=[1.0, 1.0])
    (vals, wts), est = estimate_sigma_q(state, PriorConfig.fixed(4e-7))
    assert est == 4e-7 and vals.tolist() == [4e-7]


def test_summary_round_trip(tmp_path):
    grid = build_grid([[0, 0, 0], [0.01, 0, 0]])
    lf = scalar_leadfield()
    state = make_state([(0,), (0,), (1,)], [0.5, 0.3, 0.2], sigma=[1.0, 2.0, 1.5])
    prior = PriorConfig.hyper(0.5, 5.0, n_dipoles_max=2)
    y = np.array([[1.0, 2.0]])
    s = summarize(state, y, lf, grid, prior, NoiseModel(1.0))
    assert s.est_n_dipoles == 1 and s.est_locations == [0]
    assert s.est_sigma_q == 1.0 and s.meta["sigma_q_point_estimate"] == "weighted median"
    assert s.moment_timecourses.shape == (1, 3, 2)
    s.write(tmp_path / "summary.json", grid)
    back = json.loads((tmp_path / "summary.json").read_text())
    assert back["est_coordinates"] == [[0.0, 0.0, 0.0]]
    assert back["n_dipoles_posterior"] == pytest.approx([0, 1, 0])
    write_timecourses(tmp_path / "tc.csv", s.moment_timecourses)
    lines = (tmp_path / "tc.csv").read_text().splitlines()
    assert lines[0] == "d0_x,d0_y,d0_z" and len(lines) == 3


def test_summary_empty_estimate():
    grid = build_grid([[0, 0, 0], [0.01, 0, 0]])
    state = make_state([(), (), (1,)], [0.4, 0.4, 0.2])
    s = summarize(state, np.array([[1.0]]), scalar_leadfield(), grid,
                  PriorConfig.fixed(1.0, n_dipoles_max=2), NoiseModel(1.0))
    assert s.est_n_dipoles == 0 and s.est_locations == [] and s.moment_timecourses is None
