import math

import numpy as np
import pytest

from tests.conftest import make_series, normal_max0_moments
from utils.errors import InputError
from utils.estimators import (
    EstimatorSettings,
    GroupSplit,
    cf1,
    diffusion_variance,
    estimate,
    moment_series,
    mr_variance,
    weighted_kappa,
)
from utils.mc_oracle import quad_max_moments
from utils.term_structure import CorrelationSpec, SpreadParams, TimeGrid, pair_correlation, spread_mean, spread_variance


# --- moment series ---


def test_deep_negative_spreads_have_no_maximum(short_grid):
    spreads = [SpreadParams.flat(kappa=0.1, xi=0.001, q0=-0.05), SpreadParams.flat(kappa=0.2, xi=0.001, q0=-0.04)]
    series = moment_series(spreads, CorrelationSpec.uniform(2, 0.3), short_grid)
    assert np.allclose(series.mean, 0.0, atol=1e-15)
    assert np.allclose(series.residual, 1.0, atol=1e-10)
    assert cf1(series, short_grid) == pytest.approx(1.0, abs=1e-12)


def test_single_spread_matches_normal_moments(spreads, short_grid):
    p = spreads[1]
    series = moment_series([p], CorrelationSpec.identity(1), short_grid, with_probs=False)
    for k in range(1, short_grid.steps + 1):
        t = short_grid.points[k]
        mean, raw = normal_max0_moments(spread_mean(p, t), math.sqrt(spread_variance(p, t)))
        assert series.mean[k] == pytest.approx(mean, abs=2e-7)
        assert series.raw_second[k] == pytest.approx(raw, abs=1e-9)
    assert series.mean[0] == pytest.approx(p.q0, rel=1e-15)
    assert series.variance[0] == 0.0


def test_jensen_lower_bound(spreads, corr, grid):
    series = moment_series(spreads, corr, grid, with_probs=False)
    mus = np.column_stack([spread_mean(p, grid.points) for p in spreads])
    floor = np.maximum(mus.max(axis=1), 0.0)
    assert np.all(series.mean >= floor - 1e-12)
    assert np.all(series.variance >= 0.0)
    assert not series.gamma_clamped.any()


def test_two_spreads_match_bivariate_quadrature(spreads, corr):
    grid = TimeGrid(maturity=20.0, dt=10.0)
    series = moment_series(spreads, corr, grid, with_probs=False)
    t = 20.0
    mus = [spread_mean(p, t) for p in spreads]
    sig = [math.sqrt(spread_variance(p, t)) for p in spreads]
    rho_t = pair_correlation(spreads[0], spreads[1], corr.rho[0, 1], t)
    assert series.mean[-1] == pytest.approx(quad_max_moments(mus, sig, rho_t, order=1), abs=1e-6)
    assert series.raw_second[-1] == pytest.approx(quad_max_moments(mus, sig, rho_t, order=2), rel=1e-4)


def test_probabilities_close_at_every_time(spreads, corr, short_grid):
    series = moment_series(spreads, corr, short_grid)
    assert series.probs.shape == (short_grid.steps + 1, 2)
    assert np.allclose(series.probs.sum(axis=1) + series.residual, 1.0, atol=1e-12)
    assert not any("differs from H(0)" in w for w in series.warnings)


def test_workers_do_not_change_the_series(spreads, corr, short_grid):
    one = moment_series(spreads, corr, short_grid, workers=1)
    two = moment_series(spreads, corr, short_grid, workers=2)
    assert np.array_equal(one.mean, two.mean)
    assert np.array_equal(one.variance, two.variance)
    assert np.array_equal(one.probs, two.probs)


def test_moment_series_rejects_negative_correlation(spreads, short_grid):
    with pytest.raises(InputError) as info:
        moment_series(spreads, CorrelationSpec.uniform(2, -0.2), short_grid)
    assert info.value.field == "corr"


def test_far_away_second_group_leaves_moments_unchanged(spreads, short_grid):
    far = SpreadParams.flat(kappa=0.01, xi=0.001, q0=-1.0)
    rho = np.array([[1.0, 0.3, 0.0], [0.3, 1.0, 0.0], [0.0, 0.0, 1.0]])
    grouped = moment_series(spreads + [far], CorrelationSpec(rho), short_grid, groups=GroupSplit(size=2), with_probs=False)
    pooled = moment_series(spreads, CorrelationSpec.uniform(2, 0.3), short_grid, with_probs=False)
    assert np.allclose(grouped.mean, pooled.mean, atol=1e-6, rtol=0)


def test_constant_spread_far_below_zero_leaves_the_series_unchanged(spreads):
    grid = TimeGrid(maturity=20.0, dt=1.0)
    parked = SpreadParams.flat(kappa=0.1, xi=0.0, q0=-0.05)
    rho = np.array([[1.0, 0.6, 0.0], [0.6, 1.0, 0.0], [0.0, 0.0, 1.0]])
    base = moment_series(spreads, CorrelationSpec.uniform(2, 0.6), grid)
    with_constant = moment_series(spreads + [parked], CorrelationSpec(rho), grid)
    assert np.allclose(with_constant.gamma, base.gamma, atol=1e-15, rtol=0)
    assert base.gamma[1:].min() > 0.5
    assert np.allclose(with_constant.mean, base.mean, atol=1e-15, rtol=0)
    assert np.allclose(with_constant.variance, base.variance, atol=1e-15, rtol=0)
    assert np.allclose(with_constant.probs[:, :2], base.probs, atol=1e-14, rtol=0)
    assert np.all(with_constant.probs[:, 2] == 0.0)


def test_constant_spread_above_zero_sets_the_floor(spreads, short_grid):
    level = 0.002
    p = spreads[1]
    pinned = SpreadParams.flat(kappa=0.1, xi=0.0, q0=level)
    series = moment_series([p, pinned], CorrelationSpec.uniform(2, 0.3), short_grid)
    for k in range(1, short_grid.steps + 1):
        t = short_grid.points[k]
        sigma = math.sqrt(spread_variance(p, t))
        mean, _ = normal_max0_moments(spread_mean(p, t) - level, sigma)
        assert series.mean[k] == pytest.approx(level + mean, abs=2e-7)
        assert series.probs[k, 1] == pytest.approx(
            0.5 * math.erfc((spread_mean(p, t) - level) / (sigma * math.sqrt(2.0))), abs=1e-8
        )
    assert np.allclose(series.residual, 0.0, atol=1e-12)


# --- left-sum estimators ---


def test_cf1_left_sums():
    grid = TimeGrid(maturity=1.0, dt=0.1)
    assert cf1(make_series(grid, 0.01), grid) == pytest.approx(math.exp(-0.01), rel=1e-14)
    # the value at T is never used
    assert cf1(make_series(grid, grid.points), grid) == pytest.approx(math.exp(-0.45), rel=1e-12)
    with pytest.raises(InputError):
        cf1(make_series(TimeGrid(maturity=2.0, dt=0.1), 0.01), grid)


def test_diffusion_variance_constant_coefficient():
    grid = TimeGrid(maturity=2.0, dt=0.1)
    v = 1e-6
    psi = diffusion_variance(make_series(grid, 0.001, variance=v), grid)
    assert psi == pytest.approx(v * (grid.maturity ** 2 + grid.maturity * grid.dt), rel=1e-12)
    assert diffusion_variance(make_series(grid, 0.001), grid) == 0.0


def test_diffusion_variance_clamps_decreasing_paths():
    grid = TimeGrid(maturity=2.0, dt=0.1)
    variance = np.full(grid.steps + 1, 1e-6)
    variance[5] = 5e-7
    notes = []
    psi = diffusion_variance(make_series(grid, 0.001, variance=variance), grid, notes=notes)
    assert len(notes) == 1 and "1 negative variance increments clamped" in notes[0]
    assert psi > diffusion_variance(make_series(grid, 0.001, variance=1e-6), grid)


def test_diffusion_variance_raw_mode_uses_second_moment():
    grid = TimeGrid(maturity=2.0, dt=0.1)
    series = make_series(grid, 0.001, variance=1e-6)
    raw = diffusion_variance(series, grid, "raw")
    assert raw == pytest.approx((1e-6 + 1e-6) * (4.0 + 0.2), rel=1e-12)


def test_weighted_kappa():
    grid = TimeGrid(maturity=1.0, dt=0.5)
    series = make_series(grid, 0.001, probs=[0.25, 0.5])
    assert np.allclose(weighted_kappa(series, [0.2, 0.4]), 0.25)
    assert np.allclose(series.residual, 0.25)
    with pytest.raises(InputError):
        weighted_kappa(series, [0.2])
    with pytest.raises(InputError):
        weighted_kappa(make_series(grid, 0.001), [0.2, 0.4])


@pytest.mark.parametrize("inner", ["s", "t"])
def test_mr_variance_without_reversion(inner):
    grid = TimeGrid(maturity=2.0, dt=0.1)
    v = 2e-6
    chi = mr_variance(make_series(grid, 0.001, variance=v), np.zeros(grid.steps + 1), grid, inner_variable=inner)
    assert chi == pytest.approx(v * (4.0 - 0.2), rel=1e-12)


def test_mr_variance_constant_reversion():
    grid = TimeGrid(maturity=10.0, dt=0.01)
    kappa, v = 0.5, 1e-6
    chi = mr_variance(make_series(grid, 0.001, variance=v), np.full(grid.steps + 1, kappa), grid)
    T = grid.maturity
    expected = 2 * v * (T / kappa - (1 - math.exp(-kappa * T)) / kappa ** 2)
    assert chi == pytest.approx(expected, rel=1e-2)
    assert mr_variance(make_series(grid, 0.001), np.full(grid.steps + 1, kappa), grid) == 0.0


def test_mr_variance_rejects_unknown_inner_variable():
    grid = TimeGrid(maturity=1.0, dt=0.5)
    with pytest.raises(InputError):
        mr_variance(make_series(grid, 0.001), np.zeros(3), grid, inner_variable="u")


# --- estimate ---


def test_estimate_identities(spreads, corr, short_grid):
    report = estimate(spreads, corr, short_grid, EstimatorSettings(base_discount=0.9))
    assert 0.0 < report.cf1 <= 1.0
    assert report.psi >= 0.0 and report.chi >= 0.0
    assert report.cf2_diffusion == pytest.approx(report.cf1 * (1 + report.psi / 2), rel=1e-15)
    assert report.cf2_mr == pytest.approx(report.cf1 * (1 + report.chi / 2), rel=1e-15)
    # mean reversion damps the integrated variance
    assert report.chi <= report.psi
    assert report.discounted()["cf1"] == pytest.approx(0.9 * report.cf1)
    row = report.as_row()
    assert row["cf2_mr_discounted"] == pytest.approx(0.9 * report.cf2_mr)
    assert row["variance_mode"] == "central"


def test_estimate_reuses_series(spreads, corr, short_grid):
    series = moment_series(spreads, corr, short_grid)
    a = estimate(spreads, corr, short_grid, series=series)
    b = estimate(spreads, corr, short_grid)
    assert a.cf1 == b.cf1 and a.cf2_mr == b.cf2_mr


def test_estimate_first_order_only(spreads, corr, short_grid):
    report = estimate(spreads, corr, short_grid, EstimatorSettings(estimators=("cf1",)))
    assert report.psi is None and report.cf2_mr is None
    assert report.series.probs is None
    assert set(report.as_row()) >= {"cf1", "psi", "chi"}


def test_zero_volatility_makes_all_estimators_equal(short_grid):
    spreads = [SpreadParams.flat(kappa=0.1, xi=0.0, q0=0.01), SpreadParams.flat(kappa=0.2, xi=0.0, q0=0.005)]
    report = estimate(spreads, CorrelationSpec.uniform(2, 0.3), short_grid)
    assert report.cf1 == pytest.approx(math.exp(-0.01 * short_grid.maturity), rel=1e-12)
    assert report.cf2_diffusion == report.cf1
    assert report.cf2_mr == report.cf1


def test_clamped_gamma_is_reported(spreads, short_grid):
    report = estimate(spreads, CorrelationSpec.uniform(2, 0.9), short_grid, EstimatorSettings(estimators=("cf1",)))
    assert any("gamma clamped" in w for w in report.warnings)
    assert report.series.gamma_clamped[1:].all()


def test_estimator_settings_validation():
    with pytest.raises(InputError) as info:
        EstimatorSettings(variance_mode="both")
    assert info.value.field == "variance_mode"
    with pytest.raises(InputError):
        EstimatorSettings(estimators=("cf3",))
    with pytest.raises(InputError):
        EstimatorSettings(base_discount=0.0)


def test_cf1_converges_at_first_order_in_the_step(spreads, corr):
    values = []
    for dt in (1.0, 0.5, 0.25, 0.125):
        grid = TimeGrid(maturity=10.0, dt=dt)
        values.append(cf1(moment_series(spreads, corr, grid, with_probs=False), grid))
    diffs = np.abs(np.diff(values))
    assert np.all(diffs > 0)
    assert np.log2(diffs[:-1] / diffs[1:]).min() >= 0.9
