import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gmrfscan.detectors import (
    GLRT_THRESHOLD,
    FisherDetector,
    GlrtDetector,
    RankDeficiencyWarning,
    RegionSkipped,
    calibrate_threshold_mc,
    fisher_statistic,
    fisher_statistic_region,
    fisher_threshold_theoretical,
    glrt_precompute,
    glrt_statistic,
    glrt_test,
    make_detector,
    null_max_statistics,
)
from gmrfscan.errors import ConfigError, EmptyScanError
from gmrfscan.gmrf import ArParams, CovBuilder, PhiField, ar_to_gmrf, axis_phi, covariance_submatrix
from gmrfscan.lattice import Region, explicit_class, hypercube_class, interval_class, make_lattice
from gmrfscan.simulate import PatchSampler, alternative_batch, make_rng, sample_null

LAT = make_lattice(1, 500)
C50 = interval_class(LAT, 50)
AR5 = ar_to_gmrf(ArParams((0.5,)))
AR9 = ar_to_gmrf(ArParams((0.9,)))


# -- GLRT ------------------------------------------------------------------


def test_glrt_matches_direct_formula(rng):
    lat = make_lattice(1, 60)
    regions = interval_class(lat, 10)
    x = rng.standard_normal(lat.n)
    out = glrt_statistic(x, regions, AR5, lat=lat)
    g = covariance_submatrix(AR5, Region.interval(1, 10), CovBuilder(9)(AR5))
    m = np.eye(10) - np.linalg.inv(g)
    lc = math.log(len(regions))
    norm = np.linalg.norm(m, "fro") * math.sqrt(lc) + np.linalg.norm(m, 2) * lc
    for i in (0, 17, len(regions) - 1):
        xs = x[i : i + 10]
        assert out.per_region[i] == pytest.approx((xs @ m @ xs - np.trace(m)) / norm, rel=1e-10)
    assert out.max_value == np.max(out.per_region)


@pytest.mark.filterwarnings("ignore:some regions have")
def test_glrt_shared_precomputation_matches_explicit_regions(rng):
    lat = make_lattice(2, 12)
    phi = axis_phi(2, 0.15)
    box = hypercube_class(lat, 4)
    expl = explicit_class(list(box))
    x = rng.standard_normal(lat.n)
    a = GlrtDetector(lat, box, phi).statistics(x)
    b = GlrtDetector(lat, expl, phi).statistics(x)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    assert len(glrt_precompute(box, phi).shapes) == 1


def test_glrt_zero_field():
    lat = make_lattice(1, 30)
    regions = interval_class(lat, 5)
    pre = glrt_precompute(regions, AR5)
    out = glrt_statistic(np.zeros(lat.n), regions, AR5, pre=pre, lat=lat)
    st = next(iter(pre.shapes.values()))
    key = next(iter(pre.shapes))
    np.testing.assert_allclose(out.per_region, -st.trace / pre.normalizer(key))


def test_glrt_preconditions():
    with pytest.raises(ConfigError):
        glrt_precompute(C50, PhiField.zero(1, 1))
    with pytest.raises(ConfigError):
        glrt_precompute(interval_class(make_lattice(1, 5), 5), AR5)


def test_glrt_precomputed_matrices_symmetric():
    pre = glrt_precompute(C50, AR5)
    for st in pre.shapes.values():
        np.testing.assert_allclose(st.m, st.m.T, atol=1e-12)


def test_glrt_numerator_centered():
    det = GlrtDetector(LAT, C50, AR5)
    x = make_rng(1).standard_normal((4000, LAT.n))
    num = det.numerators(x)[:, [0, 200, 450]]
    se = num.std(axis=0) / math.sqrt(len(num))
    assert np.all(np.abs(num.mean(axis=0)) < 4 * se)


def test_glrt_null_rejection_rate():
    det = GlrtDetector(LAT, C50, AR5)
    mx = null_max_statistics(det, 2000, seed=5)
    assert (mx > GLRT_THRESHOLD).mean() <= 0.01


def _ar9_alternative(n):
    sampler = PatchSampler(AR9, Region.interval(201, 50), CovBuilder(49)(AR9))
    return alternative_batch(LAT, sampler, make_rng(6), n)


@pytest.mark.xfail(strict=True, reason="at n=500 the planted U is about 1.3, far below the universal threshold 4")
def test_glrt_universal_threshold_power_ar9():
    det = GlrtDetector(LAT, C50, AR9)
    assert (det.max_statistic(_ar9_alternative(200))[0] > GLRT_THRESHOLD).mean() >= 0.95


def test_glrt_calibrated_power_ar9():
    det = GlrtDetector(LAT, C50, AR9)
    thr = calibrate_threshold_mc(det, 0.05, 1000, seed=2).threshold
    mx = det.max_statistic(_ar9_alternative(200))[0]
    assert (mx > thr).mean() >= 0.95
    assert 1.0 < np.median(mx) < 2.0  # expected value tr(G^-1 - I) / normaliser ~ 1.3
    out = glrt_test(_ar9_alternative(1)[0], C50, AR9, pre=det.pre, lat=LAT)
    assert out.threshold == 4.0 and out.reject == (out.max_value > 4.0)


def test_glrt_calibrated_threshold_below_universal():
    det = GlrtDetector(LAT, C50, AR9)
    assert calibrate_threshold_mc(det, 0.05, 1000, seed=2).threshold <= GLRT_THRESHOLD


# -- Fisher ----------------------------------------------------------------


@pytest.mark.parametrize("d,m,side,h", [(1, 80, 12, 1), (1, 80, 15, 2), (2, 14, 6, 1), (2, 16, 9, 2)])
def test_fisher_fast_path_matches_lstsq(d, m, side, h, rng):
    lat = make_lattice(d, m)
    regions = hypercube_class(lat, side)
    x = rng.standard_normal(lat.n)
    fast = FisherDetector(lat, regions, h).statistics(x)[0]
    for i in np.linspace(0, len(regions) - 1, 7).astype(int):
        assert fast[i] == pytest.approx(fisher_statistic_region(x, regions[i], h, lat), rel=1e-9)


def test_fisher_explicit_class_matches_box(rng):
    lat = make_lattice(2, 10)
    box = hypercube_class(lat, 5)
    x = rng.standard_normal(lat.n)
    np.testing.assert_allclose(FisherDetector(lat, box, 1).statistics(x),
                               FisherDetector(lat, explicit_class(list(box)), 1).statistics(x), rtol=1e-9)


@given(st.floats(-1e3, 1e3).filter(lambda c: abs(c) > 1e-3), st.integers(0, 1000))
def test_fisher_scale_invariance(c, seed):
    lat = make_lattice(1, 60)
    regions = interval_class(lat, 20)
    x = np.random.default_rng(seed).standard_normal(lat.n)
    det = FisherDetector(lat, regions, 1)
    a, b = det.statistics(x), det.statistics(c * x)
    np.testing.assert_allclose(a, b, rtol=1e-8)
    assert np.all(a >= 0)


def test_fisher_null_mean_large_region():
    region = explicit_class([Region.interval(1, 500)])
    det = FisherDetector(LAT, region, 1)
    t = det.statistics(make_rng(3).standard_normal((4000, LAT.n)))[:, 0]
    se = t.std() / math.sqrt(len(t))
    assert abs(t.mean() - 2) < max(4 * se, 0.2)


def test_fisher_power_single_patch():
    region = Region.interval(201, 50)
    det = FisherDetector(LAT, explicit_class([region]), 1)
    sampler = PatchSampler(AR9, region, CovBuilder(49)(AR9))
    x = alternative_batch(LAT, sampler, make_rng(4), 1000)
    assert (det.statistics(x)[:, 0] > 10).mean() >= 0.9


def test_fisher_single_region_and_monotone_classes(rng):
    x = rng.standard_normal(LAT.n)
    single = fisher_statistic(x, explicit_class([C50[7]]), 1, lat=LAT)
    assert single.max_value == pytest.approx(fisher_statistic_region(x, C50[7], 1, LAT))
    small = fisher_statistic(x, C50.subset(range(0, 451, 3)), 1, lat=LAT).max_value
    assert fisher_statistic(x, C50, 1, lat=LAT).max_value >= small


def test_fisher_skips_and_empty_scan():
    lat = make_lattice(1, 20)
    with pytest.raises(EmptyScanError):
        FisherDetector(lat, interval_class(lat, 4), 1)
    with pytest.raises(RegionSkipped):
        fisher_statistic_region(np.zeros(20), Region.interval(1, 2), 1, lat)
    mixed = explicit_class([Region.interval(1, 3), Region.interval(5, 12)])
    out = FisherDetector(lat, mixed, 1).scan(make_rng(0).standard_normal(20))
    assert out.skipped == [0] and math.isnan(out.per_region[0]) and out.argmax == 1


def test_fisher_rank_deficiency_warns():
    lat = make_lattice(1, 20)
    x = np.ones(20)
    with pytest.warns(RankDeficiencyWarning):
        fisher_statistic_region(x, Region.interval(1, 20), 1, lat)


def test_fisher_theoretical_threshold():
    expected = 2 + math.sqrt(2 * (math.log(451) + 1 + math.log(20))) + math.log(451) + math.log(20)
    assert fisher_threshold_theoretical(2, 451, 0.05) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(15.6, abs=0.05)
    assert fisher_threshold_theoretical(2, 451, 0.05, c3=0.0) == 2
    assert fisher_threshold_theoretical(4, 1, 1 - 1e-12) == pytest.approx(4 + math.sqrt(4), abs=1e-5)
    with pytest.raises(ConfigError):
        fisher_threshold_theoretical(2, 10, 1.0)


# -- calibration and outputs ----------------------------------------------


def test_calibration_median_and_errors():
    lat = make_lattice(1, 100)
    det = FisherDetector(lat, interval_class(lat, 20), 1)
    cal = calibrate_threshold_mc(det, 0.5, 400, seed=1)
    mx = null_max_statistics(det, 400, seed=1)
    assert cal.threshold == pytest.approx(np.median(mx))
    assert cal.se > 0
    with pytest.raises(ConfigError):
        calibrate_threshold_mc(det, 0.05, 50, seed=1)
    with pytest.raises(ConfigError):
        calibrate_threshold_mc(det, 0.01, 200, seed=1)


def test_null_maxima_independent_of_block_processing():
    lat = make_lattice(1, 100)
    det = FisherDetector(lat, interval_class(lat, 20), 1)
    a = null_max_statistics(det, 600, seed=3)
    b = null_max_statistics(det, 300, seed=3)
    np.testing.assert_array_equal(a[:250], b[:250])


def test_detector_output_contract(rng):
    lat = make_lattice(1, 50)
    regions = interval_class(lat, 10)
    out = fisher_statistic(sample_null(lat, 1), regions, 1)
    assert out.max_value == np.nanmax(out.per_region)
    assert out.per_region[out.argmax] == out.max_value
    thr = out.with_threshold(out.max_value)
    assert thr.reject is False and out.with_threshold(out.max_value - 1e-9).reject is True
    js = out.to_json(emit_all=True)
    assert len(js["per_region"]) == len(regions)
    assert len(out.as_mapping()) == len(regions)


def test_first_argmax_tie_break():
    lat = make_lattice(1, 30)
    regions = interval_class(lat, 5)
    det = GlrtDetector(lat, regions, AR5)
    out = det.scan(np.zeros(lat.n))
    assert out.argmax == 0


def test_make_detector():
    assert make_detector({"type": "fisher", "h": 2}, LAT, C50).h == 2
    with pytest.raises(ConfigError):
        make_detector({"type": "glrt"}, LAT, C50)
    with pytest.raises(ConfigError):
        make_detector({"type": "lasso"}, LAT, C50)
