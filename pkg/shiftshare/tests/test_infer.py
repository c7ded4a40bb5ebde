"""Test conventional and shift-share standard errors and confidence sets."""

import math

import numpy as np
import pytest

from shiftshare import (
    AkmInfeasible,
    ClusterError,
    ConfidenceSet,
    DataError,
    Design,
    IncompleteSharesWarning,
    SharesMatrix,
    ShiftShareValueError,
    Shifters,
    SmallClusterWarning,
    WeakInstrumentDegenerate,
    build_loo_instrument,
    ci_akm0,
    factorize_shares,
    fit_iv,
    infer,
    iv_fit,
    ols_fit,
    se_akm,
    se_akm_loo,
    se_conventional,
    sector_project,
)
from shiftshare.infer import (
    critical_value, loo_cross_terms, solve_acceptance_region)
from shiftshare.tests.utils import (
    akm0_grid_accepts,
    loo_cross_terms_quadruple_loop,
    random_concentrated_shares,
    random_shares,
)

Z95 = 1.959963984540054


def test_critical_value():
    assert critical_value(0.95) == pytest.approx(Z95, rel=1e-12)
    for level in (0.0, 1.0, 1.5):
        with pytest.raises(ShiftShareValueError):
            critical_value(level)


def test_robust_se_concentrated(concentrated):
    shares, shifters, design = concentrated
    result = se_conventional(ols_fit(design, shares, shifters))
    assert result.method == 'robust'
    assert result.se == pytest.approx(math.sqrt(0.75) / 4)
    assert result.confset.lo == pytest.approx(1.25 - Z95 * result.se)
    assert result.effective_se == pytest.approx(result.se)


def test_cluster_se_concentrated(concentrated):
    shares, shifters, design = concentrated
    fit = ols_fit(design, shares, shifters)
    with pytest.warns(SmallClusterWarning):
        result = se_conventional(fit, cluster=('s1', 's1', 's2', 's2'))
    assert result.method == 'cluster'
    assert result.se == pytest.approx(math.sqrt(0.5) / 4)


def test_akm_se_concentrated(concentrated):
    shares, shifters, design = concentrated
    result = se_akm(ols_fit(design, shares, shifters), shares)
    assert result.se == pytest.approx(math.sqrt(0.5) / 4)
    np.testing.assert_allclose(result.x_hat_sector, [1.0, -1.0])
    np.testing.assert_allclose(result.sector_terms, [0.5, 0.5])


def test_exact_fit_has_zero_se(identity):
    shares, shifters, design = identity
    fit = ols_fit(design, shares, shifters)
    assert se_conventional(fit).se == pytest.approx(0.0, abs=1e-12)
    assert se_akm(fit, shares).se == pytest.approx(0.0, abs=1e-12)


def test_small_sample_factors(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    n, k = 30, 3
    plain = se_conventional(fit).se
    assert se_conventional(fit, small_sample=True).se == pytest.approx(
        plain * math.sqrt(n / (n - k)))
    cluster = tuple(f'c{i % 10}' for i in range(n))
    plain = se_conventional(fit, cluster).se
    factor = 10 / 9 * (n - 1) / (n - k)
    assert se_conventional(fit, cluster, small_sample=True).se == \
        pytest.approx(plain * math.sqrt(factor))


def test_single_cluster_is_an_error(concentrated):
    shares, shifters, design = concentrated
    fit = ols_fit(design, shares, shifters)
    with pytest.raises(ClusterError):
        se_conventional(fit, cluster=('a',) * 4)


def test_akm_equals_sector_cluster_on_concentrated_designs(rng):
    for _ in range(100):
        n_sectors = int(rng.integers(2, 13))
        n_regions = int(rng.integers(n_sectors + 1, 61))
        shares, assignment = random_concentrated_shares(
            rng, n_regions, n_sectors)
        shifters = Shifters(rng.normal(size=n_sectors))
        design = Design(rng.normal(size=n_regions))
        fit = ols_fit(design, shares, shifters)
        akm = se_akm(fit, shares).se
        cluster = se_conventional(fit, cluster=assignment, warn=False).se
        assert akm == pytest.approx(cluster, rel=1e-10, abs=1e-14)


def test_akm_single_sector_cluster_matches_double_sum(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    plain = se_akm(fit, shares)
    clustered = se_akm(fit, shares, sector_cluster=('all',) * 5)
    x_hat, scores = plain.x_hat_sector, plain.sector_terms
    meat = sum(x_hat[s] * scores[s] * x_hat[t] * scores[t]
               for s in range(5) for t in range(5))
    assert clustered.se == pytest.approx(
        math.sqrt(meat) / abs(fit.denominator), rel=1e-10)


def test_sector_projection_recovers_shifters(rng):
    shares = random_shares(rng, 12, 4)
    values = rng.normal(size=4)
    projection = sector_project(shares, shares.w @ values)
    np.testing.assert_allclose(projection.x_hat_sector, values, rtol=1e-10)
    identity = SharesMatrix(('a', 'b'), ('s', 't'), np.eye(2))
    np.testing.assert_allclose(
        sector_project(identity, [0.3, -0.7]).x_hat_sector, [0.3, -0.7])


def test_factorization_is_reusable(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    factorization = factorize_shares(shares)
    reused = sector_project(shares, fit.x_dotdot,
                            factorization=factorization)
    np.testing.assert_allclose(
        reused.x_hat_sector,
        sector_project(shares, fit.x_dotdot).x_hat_sector)


def test_akm_rescaling_and_constant_shifts(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    base = se_akm(fit, shares)
    scaled = Shifters(4.0 * shifters.values, shifters.sectors)
    rescaled = se_akm(ols_fit(design, shares, scaled), shares)
    assert rescaled.estimate == pytest.approx(base.estimate / 4, rel=1e-10)
    assert rescaled.se == pytest.approx(base.se / 4, rel=1e-10)
    shifted = ols_fit(design.with_outcome(design.y1 + 3.0), shares, shifters)
    assert se_akm(shifted, shares).se == pytest.approx(base.se, rel=1e-10)


def test_singleton_sector_clusters_match_unclustered(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    clustered = se_akm(fit, shares, sector_cluster=shares.sectors)
    assert clustered.se == pytest.approx(se_akm(fit, shares).se, rel=1e-14)


def test_akm0_contains_estimate(rng):
    for _ in range(20):
        shares = random_shares(rng, 25, 4)
        shifters = Shifters(rng.normal(size=4), shares.sectors)
        design = Design(rng.normal(size=25), z=np.ones(25))
        fit = ols_fit(design, shares, shifters)
        assert bool(ci_akm0(fit, shares).confset.contains(fit.estimate))


def test_akm_infeasible():
    shares = SharesMatrix(('r1', 'r2'), ('s1', 's2', 's3'),
                          [[0.2, 0.3, 0.5], [0.5, 0.5, 0.0]])
    fit = ols_fit(Design([1.0, 0.0]), shares, Shifters([1.0, 2.0, 0.0]))
    with pytest.raises(AkmInfeasible) as excinfo:
        se_akm(fit, shares)
    assert excinfo.value.reason == 'N < S'


def test_unit_weights_match_unweighted(random_instance):
    shares, shifters, design = random_instance
    weighted = Design(design.y1, z=design.z, obs_weight=np.ones(30))
    plain = se_akm(ols_fit(design, shares, shifters), shares).se
    assert se_akm(ols_fit(weighted, shares, shifters), shares).se == \
        pytest.approx(plain, rel=1e-12)


def test_incomplete_shares_warn():
    shares = SharesMatrix(('r1', 'r2', 'r3'), ('s1', 's2'),
                          [[0.5, 0.2], [0.1, 0.6], [0.3, 0.3]])
    fit = ols_fit(Design([1.0, -1.0, 0.5]), shares, Shifters([1.0, -1.0]))
    with pytest.warns(IncompleteSharesWarning):
        se_akm(fit, shares)
    se_akm(fit, shares, check_shares=False)


def test_confidence_set_shapes():
    interval = ConfidenceSet('interval', -1.0, 2.0, 0.95)
    assert interval.length == 3.0
    assert interval.effective_se == pytest.approx(3.0 / (2 * Z95))
    np.testing.assert_array_equal(interval.contains([-2.0, 0.0, 2.0]),
                                  [False, True, True])
    rays = ConfidenceSet('union_of_two_rays', -1.0, 2.0, 0.95)
    assert rays.length == math.inf
    assert rays.effective_se == math.inf
    np.testing.assert_array_equal(rays.contains([-2.0, 0.0, 2.0]),
                                  [True, False, True])
    full = ConfidenceSet.full_line(0.95)
    assert bool(full.contains(1e300))
    empty = ConfidenceSet.empty(0.95)
    assert not bool(empty.contains(0.0))
    assert math.isnan(empty.effective_se)
    half = ConfidenceSet('interval', 1.0, math.inf, 0.95)
    assert half.length == math.inf


def test_degenerate_quadratic_shapes():
    # 0 theta^2 + b theta + c: a half-line on the side where b theta <= -c
    left = solve_acceptance_region(0.0, 2.0, -4.0, 0.95, 1.0, 1.0)
    assert (left.shape, left.lo, left.hi) == ('interval', -math.inf, 2.0)
    right = solve_acceptance_region(0.0, -2.0, -4.0, 0.95, 1.0, 1.0)
    assert (right.shape, right.lo, right.hi) == ('interval', -2.0, math.inf)
    assert right.effective_se == math.inf
    assert not bool(right.contains(-3.0))
    none = solve_acceptance_region(0.0, 0.0, 1.0, 0.95, 1.0, 1.0)
    assert none.shape == 'empty'
    assert math.isnan(none.lo) and math.isnan(none.effective_se)
    everything = solve_acceptance_region(0.0, 0.0, -1.0, 0.95, 1.0, 1.0)
    assert everything.shape == 'full_line'


def test_akm0_few_sectors_is_unbounded():
    shares = SharesMatrix(('r1', 'r2'), ('s1', 's2'), np.eye(2))
    fit = ols_fit(Design([1.0, 0.5]), shares, Shifters([1.0, -1.0]))
    # leading coefficient 4 - 2 z^2 is negative
    result = ci_akm0(fit, shares)
    assert result.se is None
    assert result.confset.shape in ('union_of_two_rays', 'full_line')
    assert bool(result.confset.contains(1e6))
    assert result.effective_se == math.inf


def test_akm0_exact_fit_collapses_to_estimate():
    shares = SharesMatrix(tuple('abcde'), tuple('vwxyz'), np.eye(5))
    x = np.array([1.0, -1.0, 1.0, -1.0, 1.0])
    fit = ols_fit(Design(2 * x), shares, Shifters(x))
    confset = ci_akm0(fit, shares).confset
    assert confset.shape == 'interval'
    assert confset.lo == pytest.approx(2.0, abs=1e-6)
    assert confset.hi == pytest.approx(2.0, abs=1e-6)


def _check_against_grid(fit, shares, n_grid=100_000):
    result = ci_akm0(fit, shares)
    confset = result.confset
    center = fit.estimate
    reference = se_akm(fit, shares).se
    half_width = 10 * max(reference, abs(center), 1.0)
    if confset.shape != 'full_line':
        for endpoint in (confset.lo, confset.hi):
            if math.isfinite(endpoint):
                half_width = max(half_width, 2 * abs(endpoint - center))
    grid = np.linspace(center - half_width, center + half_width, n_grid)
    step = grid[1] - grid[0]
    accepted = akm0_grid_accepts(fit, shares, grid)
    member = confset.contains(grid)
    near = np.zeros(n_grid, dtype=bool)
    for endpoint in (confset.lo, confset.hi):
        if math.isfinite(endpoint):
            near |= np.abs(grid - endpoint) <= 2 * step
    assert np.array_equal(accepted[~near], member[~near])
    if confset.shape == 'interval' and accepted.any():
        inside = grid[accepted]
        if math.isfinite(confset.lo) and confset.lo > grid[0]:
            assert abs(inside.min() - confset.lo) <= step
        if math.isfinite(confset.hi) and confset.hi < grid[-1]:
            assert abs(inside.max() - confset.hi) <= step


def test_akm0_matches_grid_inversion(rng):
    for _ in range(50):
        n_sectors = int(rng.integers(2, 9))
        n_regions = int(rng.integers(max(n_sectors + 2, 10), 41))
        shares = random_shares(rng, n_regions, n_sectors,
                               concentration=rng.uniform(0.2, 2.0))
        shifters = Shifters(rng.normal(0, 2, n_sectors))
        x = shares.w @ shifters.values
        y = (rng.normal() * x + shares.w @ rng.normal(size=n_sectors)
             + rng.normal(0, 0.5, n_regions))
        design = Design(y, z=np.ones(n_regions), z_names=('intercept',))
        _check_against_grid(ols_fit(design, shares, shifters), shares)


def test_iv_akm0_matches_grid_inversion(rng):
    for _ in range(10):
        shares = random_shares(rng, 30, 5)
        shifters = Shifters(rng.normal(0, 2, 5))
        x = shares.w @ shifters.values
        y2 = x + rng.normal(0, 1, 30)
        y1 = 0.5 * y2 + shares.w @ rng.normal(size=5) + rng.normal(size=30)
        design = Design(y1, y2=y2, z=np.ones(30))
        _check_against_grid(iv_fit(design, shares, shifters), shares)


def test_akm0_runs_on_weak_instrument_fit():
    shares = SharesMatrix(('r1', 'r2', 'r3', 'r4'), ('s1', 's2'),
                          [[1, 0], [1, 0], [0, 1], [0, 1]])
    design = Design([1.0, 0.0, 2.0, 1.0], y2=[1.0, -1.0, 1.0, -1.0])
    with pytest.raises(WeakInstrumentDegenerate) as excinfo:
        iv_fit(design, shares, Shifters([1.0, -1.0]))
    result = ci_akm0(excinfo.value.fit, shares)
    assert result.confset.shape in ('union_of_two_rays', 'full_line',
                                    'empty')


def _loo_instance(rng, n_regions=8, n_sectors=3):
    shares = random_shares(rng, n_regions, n_sectors)
    agg = rng.uniform(0.5, 2.0, (n_regions, n_sectors))
    local = rng.normal(size=(n_regions, n_sectors))
    loo = build_loo_instrument(shares, agg, local)
    y2 = np.sum(shares.w * local, axis=1) + rng.normal(0, 0.2, n_regions)
    y1 = rng.normal(size=n_regions)
    design = Design(y1, y2=y2, z=np.ones(n_regions))
    return shares, loo, fit_iv(design, loo.x_hat_loo)


def test_loo_cross_terms_match_quadruple_loop(rng):
    for n_regions, n_sectors in [(4, 1), (6, 2), (10, 4)]:
        shares, loo, fit = _loo_instance(rng, n_regions, n_sectors)
        cross = loo_cross_terms(fit, shares, loo)
        oracle = loo_cross_terms_quadruple_loop(
            shares.w, loo.agg_weights, loo.psi_hat, fit.residuals,
            fit.weights)
        np.testing.assert_allclose(cross, oracle, rtol=1e-12, atol=1e-12)
        expected = (np.sum(oracle.sum(axis=0) ** 2)
                    + np.sum(oracle * oracle.T)) / np.sum(shares.n_s ** 2)
        result = se_akm_loo(fit, shares, loo)
        assert result.extra['variance_correction'] == pytest.approx(
            expected, rel=1e-10, abs=1e-12)


def test_loo_without_measurement_error_matches_akm(rng):
    shares = random_shares(rng, 10, 3)
    values = rng.normal(size=3)
    loo = build_loo_instrument(shares, shares.w / shares.n_s,
                               np.tile(values, (10, 1)))
    y2 = shares.w @ values + rng.normal(0, 0.3, 10)
    design = Design(rng.normal(size=10), y2=y2, z=np.ones(10))
    fit = fit_iv(design, loo.x_hat_loo)
    result = se_akm_loo(fit, shares, loo)
    assert result.se == pytest.approx(se_akm(fit, shares).se, rel=1e-10)
    assert result.extra['variance_correction'] == pytest.approx(0.0,
                                                                abs=1e-20)
    assert result.to_dict()['se_uncorrected'] == pytest.approx(
        result.extra['se_uncorrected'])


def test_infer_runs_methods_in_order(random_instance):
    shares, shifters, design = random_instance
    clustered = Design(design.y1, z=design.z, z_names=design.z_names,
                       region_cluster=[f'c{i % 10}' for i in range(30)])
    fit = ols_fit(clustered, shares, shifters)
    methods = ['akm0', 'robust', 'cluster', 'akm']
    results = infer(fit, shares, methods)
    assert [r.method for r in results] == methods
    assert results[3].se == pytest.approx(se_akm(fit, shares).se)
    assert results[0].confset.shape in ('interval', 'union_of_two_rays',
                                        'full_line')


def test_infer_clustered_shift_share(random_instance):
    shares, shifters, design = random_instance
    shares = shares.with_sector_cluster(('a', 'a', 'b', 'b', 'c'))
    fit = ols_fit(design, shares, shifters)
    results = infer(fit, shares, ['akm_clustered', 'akm0_clustered'])
    expected = se_akm(fit, shares, sector_cluster=shares.sector_cluster)
    assert results[0].se == pytest.approx(expected.se)
    assert results[0].method == 'akm_clustered'


def test_infer_rejects_bad_requests(random_instance):
    shares, shifters, design = random_instance
    fit = ols_fit(design, shares, shifters)
    with pytest.raises(ShiftShareValueError):
        infer(fit, shares, ['bootstrap'])
    with pytest.raises(DataError, match='region cluster'):
        infer(fit, shares, ['cluster'])
    with pytest.raises(DataError, match='sector cluster'):
        infer(fit, shares, ['akm_clustered'])
    with pytest.raises(DataError):
        infer(fit, shares, ['akm_loo'])


def test_rejects_and_to_dict(concentrated):
    shares, shifters, design = concentrated
    result = se_akm(ols_fit(design, shares, shifters), shares)
    assert result.rejects(10.0)
    assert not result.rejects(1.25)
    record = result.to_dict()
    assert record['method'] == 'akm'
    assert record['ci']['shape'] == 'interval'
    assert record['level'] == 0.95
