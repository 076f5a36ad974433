import math

import numpy as np
import pytest
from scipy.special import ndtr, ndtri
from scipy.stats import multivariate_normal

from presets.reference_params import REFERENCE_POINT_COUNTS
from utils.common_factor import (
    ConvolutionSettings,
    FactorComponent,
    FactorDecomposition,
    GridFunction,
    GridSpec,
    correlation_bound,
    decompose,
    independent_max_cdf,
    max_cdf_to_cutoff,
    max_expectation,
    max_probabilities,
    max_raw_second_moment,
    max_variance,
    optimize_gamma,
    shifted_max_cdf,
    tail_cutoff,
    two_group_max_cdf,
    two_group_max_probabilities,
)
from utils.errors import ConsistencyError, InputError, InsufficientDomainError
from utils.term_structure import pair_correlation, spread_mean, spread_variance


def _factor(means, a_vars, c_var):
    comps = tuple(FactorComponent(float(m), float(v)) for m, v in zip(means, a_vars))
    return FactorDecomposition(gamma=0.5, c_variance=c_var, sigma_min_sq=2 * c_var, components=comps)


# --- gamma ---


def test_gamma_closed_form_example():
    target = np.array([[1.0, 0.3], [0.3, 1.0]])
    assert optimize_gamma([0.001, 0.002], target) == pytest.approx(0.6, abs=1e-15)


def test_gamma_numerical_agrees_with_closed_form():
    target = np.array([[1.0, 0.3], [0.3, 1.0]])
    closed = optimize_gamma([0.001, 0.002], target, method="closed_form")
    numerical = optimize_gamma([0.001, 0.002], target, method="numerical")
    assert numerical == pytest.approx(closed, abs=1e-8)


def test_gamma_identity_and_equal_sigmas():
    assert optimize_gamma([0.001, 0.003, 0.002], np.eye(3)) == 0.0
    target = np.array([[1.0, 0.97], [0.97, 1.0]])
    assert optimize_gamma([0.002, 0.002], target) == pytest.approx(0.97)


def test_gamma_uniform_three_spreads_is_exact():
    target = np.full((3, 3), 0.45)
    np.fill_diagonal(target, 1.0)
    assert optimize_gamma([0.002, 0.002, 0.002], target) == pytest.approx(0.45, abs=1e-8)


def test_gamma_is_clamped_below_one():
    target = np.array([[1.0, 0.9], [0.9, 1.0]])
    gamma = optimize_gamma([0.001, 0.002], target, eps_gamma=1e-10)
    assert gamma == pytest.approx(1 - 1e-10, abs=1e-15)


def test_gamma_rejects_asymmetric_target():
    with pytest.raises(InputError):
        optimize_gamma([0.001, 0.002, 0.003], np.array([[1, 0.2, 0.1], [0.3, 1, 0.1], [0.1, 0.1, 1]]))


# --- decomposition ---


def test_decompose_reconstructs_marginals(spreads, corr):
    t = 20.0
    mus = [spread_mean(p, t) for p in spreads]
    sig = np.sqrt([spread_variance(p, t) for p in spreads])
    rho_t = pair_correlation(spreads[0], spreads[1], corr.rho[0, 1], t)
    gamma = optimize_gamma(sig, np.array([[1.0, rho_t], [rho_t, 1.0]]))
    dec = decompose(mus, sig, gamma)
    assert dec.c_variance == sig.min() ** 2 * gamma
    assert np.allclose(dec.a_variances + dec.c_variance, sig ** 2, rtol=1e-14, atol=0)
    # exact match of the pairwise correlation for two spreads
    assert dec.pairwise_correlation(0, 1) == pytest.approx(rho_t, rel=1e-12)


def test_decompose_edge_cases():
    dec = decompose([0.0, 0.0], [0.001, 0.001], 0.0)
    assert dec.c_variance == 0.0
    assert np.allclose(dec.a_variances, 1e-6)
    near_one = decompose([0.0, 0.0], [0.001, 0.001], 1 - 1e-10)
    assert np.all(near_one.a_variances < 1e-15)
    with pytest.raises(InputError):
        decompose([0.0], [0.001], 1.0)


def test_decomposition_sampling_preserves_marginals_and_correlation():
    rng = np.random.default_rng(7)
    sig = np.array([0.001, 0.0015, 0.002])
    dec = decompose([0.0005, -0.0002, 0.001], sig, 0.6)
    n = 1_000_000
    c = rng.normal(0.0, math.sqrt(dec.c_variance), n)
    x = c[:, None] + rng.normal(dec.means, np.sqrt(dec.a_variances), (n, 3))
    assert np.all(np.abs(x.mean(axis=0) - dec.means) < 4 * sig / math.sqrt(n))
    assert np.all(np.abs(x.var(axis=0) - sig ** 2) < 4 * sig ** 2 * math.sqrt(2.0 / n))
    emp = np.corrcoef(x.T)[0, 2]
    expected = dec.c_variance / (sig[0] * sig[2])
    assert abs(emp - expected) < 4 * (1 - expected ** 2) / math.sqrt(n)
    assert expected < sig.min() ** 2 / (sig[0] * sig[2])


# --- CDFs ---


def test_independent_max_cdf_values():
    one = _factor([0.0], [1.0], 0.0)
    assert independent_max_cdf(one, 0.0) == 0.5
    two = _factor([0.0, 0.0], [1.0, 1.0], 0.0)
    assert independent_max_cdf(two, 0.0) == pytest.approx(0.25)
    assert independent_max_cdf(two, 50.0) == 1.0
    assert independent_max_cdf(two, -50.0) == 0.0


def test_independent_max_cdf_step_for_constant_component():
    dec = _factor([0.001, 0.0], [0.0, 1e-6], 0.0)
    assert independent_max_cdf(dec, 0.0009) == 0.0
    assert independent_max_cdf(dec, 0.001) == pytest.approx(float(ndtr(1.0)))


def test_shifted_cdf_single_component_is_normal():
    sigma = 0.01
    dec = decompose([0.0], [sigma], 0.5)
    grid = GridSpec(0.0, 8 * sigma, 5e-5)
    H = shifted_max_cdf(dec, grid)
    assert np.max(np.abs(H.values - ndtr(grid.points() / sigma))) < 1e-6
    assert np.all(np.diff(H.values) >= 0)


def test_cutoff_cdf_reaches_tail(spreads):
    t = 20.0
    mus = [spread_mean(p, t) for p in spreads]
    sig = np.sqrt([spread_variance(p, t) for p in spreads])
    dec = decompose(mus, sig, 0.35)
    settings = ConvolutionSettings()
    H = max_cdf_to_cutoff(dec, settings)
    assert H.x_lo == 0.0
    assert 1.0 - H.values[-1] < settings.eps_tail
    assert np.all(np.diff(H.values) >= 0)
    assert np.all((H.values >= 0) & (H.values <= 1))


def test_tail_cutoff_normal_quantile():
    sigma = 0.01
    dec = decompose([0.0], [sigma], 0.0)
    L = tail_cutoff(dec, 1e-10)
    assert 0.0 <= L - float(ndtri(1 - 1e-10)) * sigma <= 5e-5 + 1e-12
    L7 = tail_cutoff(dec, float(ndtr(-7.0)))
    assert L7 == pytest.approx(7 * sigma, rel=0.01)


def test_tail_cutoff_grows_with_time(spreads):
    cutoffs = []
    for t in (1.0, 5.0, 20.0):
        sig = np.sqrt([spread_variance(p, t) for p in spreads])
        dec = decompose([spread_mean(p, t) for p in spreads], sig, 0.3)
        cutoffs.append(tail_cutoff(dec, 1e-10))
    assert cutoffs == sorted(cutoffs)


# --- moments ---


def test_half_normal_moments():
    sigma = 0.01
    H = max_cdf_to_cutoff(decompose([0.0], [sigma], 0.0))
    mean = max_expectation(H)
    raw = max_raw_second_moment(H)
    assert mean == pytest.approx(sigma / math.sqrt(2 * math.pi), abs=1e-7)
    assert raw == pytest.approx(sigma ** 2 / 2, abs=1e-9)
    assert max_variance(mean, raw) == pytest.approx(sigma ** 2 * (0.5 - 1 / (2 * math.pi)), abs=2e-9)


def test_moments_vanish_below_zero():
    H = max_cdf_to_cutoff(decompose([-0.5, -0.4], [0.01, 0.01], 0.2))
    assert max_expectation(H) == 0.0
    assert max_raw_second_moment(H) == 0.0


def test_moment_integrals_need_the_tail():
    sigma = 0.01
    grid = GridSpec(0.0, sigma, 5e-5)
    H = GridFunction(grid, ndtr(grid.points() / sigma))
    with pytest.raises(InsufficientDomainError):
        max_expectation(H)


def test_max_variance_rules():
    assert max_variance(0.0, 3e-5) == 3e-5
    assert max_variance(0.0, 0.0) == 0.0
    assert max_variance(0.001, 1e-6 - 1e-13) == 0.0
    with pytest.raises(ConsistencyError):
        max_variance(0.01, 1e-6)


def test_left_rule_biases_the_mean_upwards():
    H = max_cdf_to_cutoff(decompose([0.0], [0.01], 0.0))
    assert max_expectation(H, rule="left") > max_expectation(H, rule="trapezoid")


# --- probabilities ---


def test_probabilities_symmetric_pair():
    sigma = 0.01
    dec = decompose([0.0, 0.0], [sigma, sigma], 0.5)
    probs, residual = max_probabilities(dec)
    # P[both below zero] for correlation 0.5
    expected_residual = 0.25 + math.asin(0.5) / (2 * math.pi)
    assert residual == pytest.approx(expected_residual, abs=1e-8)
    assert probs == pytest.approx([(1 - expected_residual) / 2] * 2, abs=1e-8)


def test_probabilities_dominant_and_negative_components():
    probs, residual = max_probabilities(decompose([0.05, 0.0], [0.001, 0.001], 0.3))
    assert probs[0] == pytest.approx(1.0, abs=1e-10)
    assert probs[1] == pytest.approx(0.0, abs=1e-10)
    probs, residual = max_probabilities(decompose([-0.05, -0.06], [0.001, 0.001], 0.3))
    assert residual == pytest.approx(1.0, abs=1e-10)


def test_residual_matches_cdf_at_zero_on_random_inputs():
    rng = np.random.default_rng(2024)
    settings = ConvolutionSettings()
    for _ in range(100):
        mus = rng.uniform(-0.002, 0.003, 3)
        sig = rng.uniform(0.001, 0.003, 3)
        dec = decompose(mus, sig, rng.uniform(0.05, 0.8))
        probs, residual = max_probabilities(dec, settings)
        assert np.all((probs >= 0) & (probs <= 1))
        assert probs.sum() + residual == pytest.approx(1.0, abs=1e-12)
        H = max_cdf_to_cutoff(dec, settings)
        assert residual == pytest.approx(H.values[0], abs=1e-8)


def test_probabilities_without_common_factor():
    dec = decompose([0.0, 0.0], [0.01, 0.01], 0.0)
    probs, residual = max_probabilities(dec)
    assert residual == pytest.approx(0.25, abs=1e-10)
    assert probs == pytest.approx([0.375, 0.375], abs=1e-10)


# --- constant components ---


def test_decompose_keeps_zero_variance_spreads_constant():
    sig = np.array([0.002, 0.0, 0.003])
    dec = decompose([0.001, -0.01, 0.0005], sig, 0.5)
    assert dec.sigma_min_sq == pytest.approx(0.002 ** 2)
    assert dec.c_variance == pytest.approx(0.5 * 0.002 ** 2)
    assert list(dec.constant_mask) == [False, True, False]
    assert dec.total_variances[1] == 0.0
    assert np.allclose(dec.total_variances[[0, 2]], sig[[0, 2]] ** 2, rtol=1e-14, atol=0)
    assert dec.pairwise_correlation(0, 1) == 0.0
    assert dec.pairwise_correlation(0, 2) == pytest.approx(dec.c_variance / (0.002 * 0.003))
    assert dec.floor == 0.0
    assert decompose([0.0, 0.002], [0.001, 0.0], 0.3).floor == 0.002


def test_constant_component_is_not_shifted_by_the_common_factor():
    sig = [0.002, 0.003]
    level = 0.001
    loaded = decompose([0.0005, 0.0], sig, 0.4)
    with_constant = decompose([0.0005, 0.0, level], sig + [0.0], 0.4)
    grid = GridSpec.from_origin(0.02, 5e-5)
    H = shifted_max_cdf(loaded, grid).values
    H_const = shifted_max_cdf(with_constant, grid).values
    assert np.allclose(H_const, H * (grid.points() >= level), atol=1e-12, rtol=0)


def test_probabilities_with_a_constant_above_zero():
    sigma, level = 0.01, 0.001
    probs, residual = max_probabilities(decompose([0.0, level], [sigma, 0.0], 0.0))
    assert probs[1] == pytest.approx(float(ndtr(level / sigma)), abs=1e-8)
    assert probs[0] == pytest.approx(1.0 - float(ndtr(level / sigma)), abs=1e-8)
    assert residual == pytest.approx(0.0, abs=1e-8)


def test_probabilities_with_a_constant_and_a_common_factor():
    s, gamma, level = 0.002, 0.6, 0.001
    dec = decompose([0.0, 0.0, level], [s, s, 0.0], gamma)
    probs, residual = max_probabilities(dec)
    below = multivariate_normal(mean=[0.0, 0.0], cov=s ** 2 * np.array([[1.0, gamma], [gamma, 1.0]])).cdf([level, level])
    assert probs[2] == pytest.approx(below, abs=1e-5)
    assert probs[0] == pytest.approx(probs[1], abs=1e-10)
    assert probs.sum() + residual == pytest.approx(1.0, abs=1e-12)
    assert residual == pytest.approx(0.0, abs=1e-8)
    assert max_cdf_to_cutoff(dec).values[0] == 0.0


def test_constant_below_zero_changes_nothing():
    mus, sig = [0.0005, 0.0], [0.002, 0.003]
    base_probs, base_residual = max_probabilities(decompose(mus, sig, 0.4))
    probs, residual = max_probabilities(decompose(mus + [-0.01], sig + [0.0], 0.4))
    assert probs[2] == 0.0
    assert np.allclose(probs[:2], base_probs, atol=1e-14, rtol=0)
    assert residual == pytest.approx(base_residual, abs=1e-14)


def test_sub_step_common_factor_keeps_h0_and_residual_consistent(conv):
    s, sd_c = 0.002, 2e-5
    gamma = (sd_c / s) ** 2
    mus = np.array([0.0005, 0.0003])
    dec = decompose(mus, [s, s], gamma)
    assert math.sqrt(dec.c_variance) < 2 * conv.delta
    H = max_cdf_to_cutoff(dec, conv)
    a, b = -mus / s
    phi = np.exp(-0.5 * np.array([a, b]) ** 2) / math.sqrt(2 * math.pi)
    exact = float(ndtr(a) * ndtr(b)) + gamma * float(phi[0] * phi[1])
    assert H.values[0] == pytest.approx(exact, abs=1e-9)
    _, residual = max_probabilities(dec, conv)
    assert residual == pytest.approx(H.values[0], abs=conv.tau_prob)


def test_correlation_bound_reference(spreads, grid):
    assert 0.77 <= correlation_bound(spreads[0], spreads[1], grid) <= 0.80


# --- two groups ---


def test_two_group_collapses_to_pooled_model():
    c_var = 1e-6
    means = [0.001, 0.0005, 0.0015]
    a_vars = [1e-6, 1.5e-6, 0.8e-6]
    pooled = _factor(means, a_vars, c_var)
    g1 = _factor(means[:2], a_vars[:2], c_var)
    g2 = _factor(means[2:], a_vars[2:], c_var)
    grid = GridSpec(0.0, 0.01, 5e-5)
    single = shifted_max_cdf(pooled, grid).values
    double = two_group_max_cdf(g1, g2, 1 - 1e-10, grid.points(), gh_nodes=48)
    assert np.max(np.abs(single - double)) < 1e-6


def test_two_group_limits():
    g1 = _factor([0.001, 0.0005], [1e-6, 1.5e-6], 1e-6)
    far = _factor([-1.0], [1e-6], 1e-6)
    assert two_group_max_cdf(g1, far, 0.2, -1e-4) == 0.0
    assert two_group_max_cdf(g1, far, 0.2, 1.0) == pytest.approx(1.0, abs=1e-12)
    grid = GridSpec(0.0, 0.01, 5e-5)
    single = shifted_max_cdf(g1, grid).values
    double = two_group_max_cdf(g1, far, 0.2, grid.points(), gh_nodes=48)
    assert np.max(np.abs(single - double)) < 1e-6
    with pytest.raises(InputError):
        two_group_max_cdf(g1, far, 1.0, 0.0)


def test_two_group_probabilities_close_and_match_pooled():
    c_var = 1e-6
    means = [0.001, 0.0005, 0.0015]
    a_vars = [1e-6, 1.5e-6, 0.8e-6]
    settings = ConvolutionSettings(gh_nodes=48)
    g1 = _factor(means[:2], a_vars[:2], c_var)
    g2 = _factor(means[2:], a_vars[2:], c_var)
    probs, residual = two_group_max_probabilities(g1, g2, 1 - 1e-10, settings)
    assert probs.sum() + residual == pytest.approx(1.0, abs=1e-6)
    pooled_probs, pooled_residual = max_probabilities(_factor(means, a_vars, c_var), settings)
    assert residual == pytest.approx(pooled_residual, abs=1e-6)
    assert probs == pytest.approx(pooled_probs, abs=1e-5)


@pytest.mark.parametrize("t", [5.0, 20.0])
def test_cutoff_point_counts_near_reference(spreads, corr, t):
    mus = [spread_mean(p, t) for p in spreads]
    sig = np.sqrt([spread_variance(p, t) for p in spreads])
    rho_t = pair_correlation(spreads[0], spreads[1], corr.rho[0, 1], t)
    dec = decompose(mus, sig, optimize_gamma(sig, np.array([[1.0, rho_t], [rho_t, 1.0]])))
    H = max_cdf_to_cutoff(dec)
    assert H.grid.size == pytest.approx(REFERENCE_POINT_COUNTS[t], rel=0.25)
