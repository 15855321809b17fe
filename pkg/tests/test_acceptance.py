"""Acceptance suite: one PASS/FAIL line per criterion, printed even under capture.

Run alone with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
"""

import math
import sys
import time

import numpy as np
import pytest

from conftest import random_phi
from gmrfscan import bounds
from gmrfscan.detectors import FisherDetector
from gmrfscan.gmrf import ArParams, CovBuilder, ar_to_gmrf, autocovariances, axis_phi, covariance_submatrix
from gmrfscan.harness import ExperimentConfig, phase_curve, run_experiment
from gmrfscan.lattice import Region, disjoint_tiling, interval_class, make_lattice
from gmrfscan.oracle import bayes_risk_mc, lemma_suite, second_moment_check
from gmrfscan.simulate import make_rng

pytestmark = pytest.mark.acceptance


@pytest.fixture
def report(capsys):
    def emit(number: int, passed: bool, detail: str, elapsed: float, limit: float | None = None):
        timing = f"{elapsed:.2f}s" + (f" (limit {limit:g}s)" if limit else "")
        with capsys.disabled():
            print(f"\n[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail} [{timing}]")
    return emit


def _ar9_config(detector: dict, **over) -> ExperimentConfig:
    base = {
        "name": "ar9-interval",
        "lattice": {"d": 1, "m": 500},
        "regions": {"class": "intervals", "k": 50},
        "signal": {"type": "ar", "psi": [0.9]},
        "planted": [{"corner": [201], "side": 50}],
        "detector": detector,
        "n_replicates": 200,
        "seed": 2024,
    }
    base.update(over)
    return ExperimentConfig.from_dict(base)


MC5 = {"mode": "mc", "level": 0.05, "n_cal": 1000}


# 1 -----------------------------------------------------------------------


def _yule_walker_ar2(a1: float, a2: float, maxlag: int) -> np.ndarray:
    rho = [1.0, a1 / (1.0 - a2)]
    while len(rho) <= maxlag:
        rho.append(a1 * rho[-1] + a2 * rho[-2])
    return np.array(rho)


def test_criterion_1_gmrf_correctness(report):
    t0 = time.perf_counter()
    err_ar1 = 0.0
    for psi in (0.3, 0.6, 0.9):
        table = autocovariances(ar_to_gmrf(ArParams((psi,))), 10)
        err_ar1 = max(err_ar1, max(abs(table.lag(v) - psi ** abs(v)) for v in range(-10, 11)))
    err_ar2 = 0.0
    for a1, a2 in ((0.5, 0.3), (1.2, -0.5), (-0.4, 0.2)):
        table = autocovariances(ar_to_gmrf(ArParams((a1, a2))), 10)
        got = np.array([table.lag(v) for v in range(11)])
        err_ar2 = max(err_ar2, float(np.abs(got - _yule_walker_ar2(a1, a2, 10)).max()))
    elapsed = time.perf_counter() - t0
    passed = err_ar1 <= 1e-6 and err_ar2 <= 1e-5 and elapsed < 1.0
    report(1, passed, f"AR1 max err {err_ar1:.2e} (tol 1e-6), AR2 vs Yule-Walker {err_ar2:.2e} (tol 1e-5)",
           elapsed, 1)
    assert passed


# 2 -----------------------------------------------------------------------


def test_criterion_2_lemma_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20240601)
    failures, n_checks = [], 0
    for i in range(50):
        d = int(rng.choice((1, 2)))
        h = int(rng.choice((1, 2)))
        phi = random_phi(rng, d, h, float(rng.uniform(0.0, 0.9)))
        if d == 1:
            region = Region.interval(1, int(rng.integers(2 * h + 2, 101)))
        else:
            region = Region.box((1, 1), int(rng.integers(2 * h + 2, 11)))
        reports = lemma_suite(phi, region, n_sims=2000, seed=i)
        n_checks += len(reports)
        failures += [(i, r.check, r.observed, r.expected) for r in reports if not r.passed]
    elapsed = time.perf_counter() - t0
    passed = not failures and elapsed < 30
    report(2, passed, f"50 random phi, {n_checks} checks, {len(failures)} failures {failures[:3]}", elapsed, 30)
    assert passed


# 3 -----------------------------------------------------------------------


def test_criterion_3_likelihood_ratio_identities(report):
    t0 = time.perf_counter()
    s4 = Region.interval(1, 4)
    ar03 = ar_to_gmrf(ArParams((0.3,)))
    ar05 = ar_to_gmrf(ArParams((0.5,)))
    ids = second_moment_check(ar03, ar03, s4, n_sims=1_000_000, seed=31)
    ids += second_moment_check(ar05, ar05, s4, n_sims=100_000, seed=32)[:1]
    toy = make_lattice(1, 12)
    tiling = disjoint_tiling(toy, 3)
    sandwiches = [bayes_risk_mc(toy, tiling, ar_to_gmrf(ArParams((psi,))), n_sims=20_000, seed=33)
                  for psi in (0.9, 0.3)]
    elapsed = time.perf_counter() - t0
    passed = all(r.passed for r in ids) and all(s.sandwich_holds for s in sandwiches) and elapsed < 120
    detail = "; ".join(f"{r.check}: {r.observed:.5f} vs {r.expected:.5f} (+-{r.tolerance:.1e})" for r in ids)
    detail += "; toy sandwich " + ", ".join(
        f"psi={psi}: risk {s.risk:.4f} >= rhs {s.lower_bound_rhs:.4f} - 3se"
        for psi, s in zip((0.9, 0.3), sandwiches))
    report(3, passed, detail, elapsed, 120)
    assert passed


# 4 -----------------------------------------------------------------------


def test_criterion_4_null_calibration(report):
    t0 = time.perf_counter()
    lat = make_lattice(1, 500)
    regions = interval_class(lat, 50)
    glrt_cfg = _ar9_config({"type": "glrt", "threshold": {"mode": "fixed", "value": 4.0}}, n_replicates=10_000)
    (glrt_row,) = run_experiment(glrt_cfg).rows
    glrt_reject = glrt_row.type1

    fisher = FisherDetector(lat, regions, 1)
    stats = []
    for b in range(8):
        x = make_rng(4, 0, b).standard_normal((250, lat.n))
        stats.append(fisher.statistics(x))
    mean_t = float(np.nanmean(np.concatenate(stats)))

    revalidated = {}
    for det in ({"type": "fisher", "h": 1}, {"type": "glrt"}):
        cfg = _ar9_config(dict(det, threshold={"mode": "mc", "level": 0.05, "n_cal": 4000}),
                           n_replicates=4000, seed=4041)
        revalidated[det["type"]] = run_experiment(cfg).rows[0].type1
    elapsed = time.perf_counter() - t0
    passed = (glrt_reject <= 0.01 and abs(mean_t - 2.0) <= 0.2
              and all(abs(v - 0.05) <= 0.02 for v in revalidated.values()) and elapsed < 300)
    report(4, passed, f"GLRT(4) null reject {glrt_reject:.4f} (<=0.01), Fisher mean T_S {mean_t:.3f} (2+-0.2), "
           f"re-validated levels {revalidated} (0.05+-0.02)", elapsed, 300)
    assert passed


# 5 -----------------------------------------------------------------------


def test_criterion_5_power_regimes(report):
    t0 = time.perf_counter()
    rows = {}
    for det in ({"type": "fisher", "h": 1}, {"type": "glrt"}):
        (rows[det["type"]],) = run_experiment(_ar9_config(dict(det, threshold=MC5))).rows
    texture = ExperimentConfig.from_dict({
        "name": "texture-square",
        "lattice": {"d": 2, "m": 50},
        "regions": {"class": "hypercubes", "side": 15},
        "signal": {"type": "phi", **axis_phi(2, 0.25 * (1 - 1e-4)).to_json()},
        "planted": "center",
        "detector": {"type": "fisher", "h": 1, "threshold": MC5},
        "n_replicates": 100,
        "seed": 2025,
    })
    (row2,) = run_experiment(texture).rows
    elapsed = time.perf_counter() - t0
    power = {k: 1 - r.type2 for k, r in rows.items()}
    overlap = rows["fisher"].extras["overlap"][0]
    power2 = 1 - row2.type2
    passed = min(power.values()) >= 0.9 and overlap >= 0.9 and power2 >= 0.8 and elapsed < 600
    report(5, passed, f"AR(1) psi=0.9 power {power} (>=0.9), Fisher overlap {overlap:.3f} (>=0.9); "
           f"texture Fisher power {power2:.2f} (>=0.8)", elapsed, 600)
    assert passed


# 6 -----------------------------------------------------------------------


def test_criterion_6_phase_transition(report):
    t0 = time.perf_counter()
    ratios, r_half = {}, {}
    for k in (25, 50, 100):
        cfg = ExperimentConfig.from_dict({
            "name": f"phase-k{k}",
            "lattice": {"d": 1, "m": 500},
            "regions": {"class": "intervals", "k": k},
            "signal": {"type": "constant", "h": 1},
            "detector": {"type": "fisher", "h": 1, "threshold": MC5},
            "n_replicates": 400,
            "seed": 600 + k,
            "sweep": {"r": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.65, 0.7]},
        })
        curve = phase_curve(cfg, n_boot=200)
        r_half[k] = curve.r_half
        ratios[k] = curve.r_half**2 / bounds.rate_ar(500, k, 1).upper
    elapsed = time.perf_counter() - t0
    sq = [r_half[k] ** 2 for k in (25, 50, 100)]
    within = all(0.25 <= v <= 4 for v in ratios.values())
    decreasing = sq[0] > sq[1] > sq[2]
    passed = within and decreasing and elapsed < 900
    report(6, passed, "r_half^2 / upper rate " + ", ".join(f"k={k}: {r_half[k]**2:.4f}/{ratios[k]:.2f}x"
                                                           for k in ratios)
           + f"; within factor 4: {within}; decreasing in k: {decreasing}", elapsed, 900)
    assert passed


# 7 -----------------------------------------------------------------------


def test_criterion_7_bound_evaluators(report):
    t0 = time.perf_counter()
    ln = math.log
    tiling = disjoint_tiling(make_lattice(1, 500), 50)
    rate = bounds.rate_ar(500, 50, 1)
    texture = bounds.rate_texture(2500, 225, 1)
    thm3 = bounds.theorem3_conditions(tiling, 1, 0.5, 0.01)
    pairs = {
        "known-covariance bound": (bounds.known_cov_bound_value([10] * 100, 0.01, 0.1),
                                   1 - (1 / 200) * math.sqrt(100 * math.exp(1.25))),
        "impossibility radius": (bounds.known_cov_impossibility_radius(tiling, 0.5), ln(160) / 500),
        "impossibility radius |S|=1": (bounds.known_cov_impossibility_radius([1], 0.1), ln(400) / 10),
        "size/log clause rhs": (thm3.conditions["Nh_vs_size_over_log"].rhs, 50 / ln(20)),
        "size/log clause lhs": (thm3.conditions["Nh_vs_size_over_log"].lhs, 2.0),
        "AR lower rate": (rate.lower, ln(10) / 50 + math.sqrt(ln(10)) / 50),
        "AR upper rate": (rate.upper, ln(500) / 50 + math.sqrt(ln(500)) / 50),
        "texture bracket": (texture.lower, ln(2500 / 225) / 225 + math.sqrt(ln(2500 / 225)) / 225),
        "hypercube rate": (bounds.rate_hypercube(500, 50, 2).rate,
                           max(ln(10) / 50, math.sqrt(2 * ln(10)) / 50)),
    }
    region = Region.interval(1, 10)
    phi = ar_to_gmrf(ArParams((0.3,)))
    gamma = covariance_submatrix(phi, region, CovBuilder(region.diameter)(phi))
    est = bounds.vs_mc(region, bounds.degenerate_prior(phi), n_pairs=1000, seed=7)
    closed = float(np.linalg.det(np.eye(10) - (np.eye(10) - gamma) @ (np.eye(10) - gamma)) ** -0.5)
    pairs["vs_mc degenerate"] = (est.estimate, closed)
    errors = {name: abs(a - b) for name, (a, b) in pairs.items()}
    elapsed = time.perf_counter() - t0
    worst = max(errors, key=errors.get)
    passed = errors[worst] <= 1e-9 and thm3.conditions["Nh_vs_size_over_log"].satisfied and est.se <= 1e-9
    report(7, passed, f"{len(pairs)} example values, worst |err| {errors[worst]:.1e} ({worst}); "
           f"vs_mc se {est.se:.1e}", elapsed)
    assert passed


# 8 -----------------------------------------------------------------------


def test_criterion_8_performance(report):
    t0 = time.perf_counter()
    cfg = _ar9_config({"type": "glrt", "threshold": {"mode": "fixed", "value": 4.0}}, n_replicates=10_000)
    run_experiment(cfg, workers=8)
    glrt_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    lat = make_lattice(1, 100_000)
    detector = FisherDetector(lat, interval_class(lat, 100), 1)
    detector.scan(make_rng(8).standard_normal(lat.n))
    fisher_time = time.perf_counter() - t1
    passed = glrt_time < 60 and fisher_time < 5
    report(8, passed, f"GLRT 451 intervals, 1e4 null + 1e4 planted replicates on 8 workers {glrt_time:.2f}s "
           f"(<60s); Fisher n=1e5, k=100 one field {fisher_time:.2f}s (<5s)", glrt_time + fisher_time)
    assert passed


# 9 -----------------------------------------------------------------------


def test_criterion_9_determinism(report):
    t0 = time.perf_counter()
    cfg = _ar9_config({"type": "fisher", "h": 1, "threshold": {"mode": "mc", "level": 0.05, "n_cal": 600}},
                       signal={"type": "constant", "h": 1}, n_replicates=600, sweep={"r": [0.3, 0.6]})
    serial = run_experiment(cfg, workers=1).to_csv_text(include_runtime=False)
    parallel = run_experiment(cfg, workers=8).to_csv_text(include_runtime=False)
    elapsed = time.perf_counter() - t0
    passed = serial.encode() == parallel.encode()
    report(9, passed, f"1 vs 8 workers CSV byte-identical: {passed} ({len(serial)} bytes)", elapsed)
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
