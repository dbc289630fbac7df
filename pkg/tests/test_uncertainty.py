import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logit

from cjsmooth.fit import FitOptions, FitResult, maximize
from cjsmooth.lik_array import cell_probs
from cjsmooth.model import PackedParams
from cjsmooth.problem import Problem
from cjsmooth.simgen import simulate_heron_shaped
from cjsmooth.uncertainty import (BootstrapFailedError, band_coverage, curve, curve_link, draw_arrays,
                                  nonparam_bootstrap, param_bootstrap, pointwise_band, refit,
                                  simultaneous_band, stratified_counts, write_band_csv)
from conftest import constant_history_spec

T = 7
SPEC = constant_history_spec(T, "spline_in_covariate", K=8, domain=(-3.0, 3.0))
W = np.linspace(-3, 3, 61)


def fake_fit(theta):
    return FitResult(SPEC, PackedParams(np.asarray(theta, float), SPEC.layout), np.array([1.0]),
                     0.0, 0.0, None, None, True, 1, 0.0)


def replicate_fits(n, seed, scale=0.3):
    rng = np.random.default_rng(seed)
    base = np.concatenate([np.linspace(-1, 2, 8), [0.0, 0.0]])
    fits = []
    for _ in range(n):
        th = base.copy()
        th[:8] += scale * rng.normal() + 0.2 * scale * rng.normal(size=8)
        fits.append(fake_fit(th))
    return fake_fit(base), fits


@pytest.fixture(scope="module")
def problem(constant_cov_data):
    return Problem(constant_history_spec(T, "spline_in_covariate", K=8), constant_cov_data)


@pytest.fixture(scope="module")
def fit(problem):
    return maximize(problem, [4.0], FitOptions(restarts=1))


def test_stratified_counts_preserve_strata():
    strata = np.array([1] * 5 + [2] * 3 + [3] * 7)
    counts = stratified_counts(strata, np.random.default_rng(0))
    for s in (1, 2, 3):
        assert counts[strata == s].sum() == np.sum(strata == s)


def test_nonparametric_bootstrap_strata_and_reproducibility(problem, fit):
    a = nonparam_bootstrap(problem, None, fit.h_vec, B=3, seed=9, fit=fit)
    b = nonparam_bootstrap(problem, None, fit.h_vec, B=3, seed=9, fit=fit)
    for counts, counts_b in zip(a.replicates, b.replicates):
        assert np.array_equal(counts, counts_b)
        for s in np.unique(problem.strata):
            assert counts[problem.strata == s].sum() == np.sum(problem.strata == s)
    for fa, fb in zip(a.fits, b.fits):
        assert np.array_equal(fa.theta, fb.theta)


def test_identity_resample_reproduces_fit(problem, fit):
    again = refit(problem, fit, np.ones(problem.n_units))
    assert again is not None
    assert np.max(np.abs(curve(again, 0, W) - curve(fit, 0, W))) < 1e-4


def test_parametric_bootstrap_rows_and_refits():
    data, spec, theta = simulate_heron_shaped(T=8, releases=300, seed=2)
    pr = Problem(spec, data)
    fit = maximize(pr, [4.0, 4.0, 4.0], FitOptions(restarts=1), theta0=theta)
    boot = param_bootstrap(data, fit, B=3, seed=1)
    for rep in boot.replicates:
        assert np.array_equal(rep.releases, data.releases)
        assert np.array_equal(rep.covariate, data.covariate)
    assert len(boot.fits) + len(boot.failed) == 3


def test_degenerate_parametric_draw():
    T = 5
    q_m, q_d = cell_probs([1.0] * (T - 1), [1.0] * (T - 1), [0.5] * (T - 1), T)
    rep = draw_arrays(q_m, q_d, np.full(T - 1, 40), np.random.default_rng(0))
    expected = np.zeros((T - 1, T))
    expected[np.arange(T - 1), np.arange(T - 1)] = 40
    assert np.array_equal(rep.m_counts, expected)
    assert rep.d_counts.sum() == 0


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_draw_rows_sum_to_releases(seed):
    rng = np.random.default_rng(seed)
    T = 6
    q_m, q_d = cell_probs(rng.uniform(0.1, 0.9, T - 1), rng.uniform(0, 0.9, T - 1),
                          rng.uniform(0.1, 0.9, T - 1), T)
    rel = rng.integers(0, 200, T - 1)
    rep = draw_arrays(q_m, q_d, rel, rng)
    assert np.array_equal(rep.releases, rel)


def test_pointwise_band_is_quantiles_within_unit_interval():
    est, fits = replicate_fits(40, 1)
    band = pointwise_band(fits, 0, W, 0.95, estimate=est)
    curves = np.stack([curve(f, 0, W) for f in fits])
    assert np.allclose(band.lower, np.quantile(curves, 0.025, axis=0))
    assert np.allclose(band.upper, np.quantile(curves, 0.975, axis=0))
    assert np.all((band.lower >= 0) & (band.upper <= 1) & (band.lower <= band.upper))


def test_identical_replicates_give_zero_width_band_and_unit_factor():
    est, _ = replicate_fits(1, 0)
    fits = [est] * 25
    pw = pointwise_band(fits, 0, W, estimate=est)
    assert np.array_equal(pw.lower, pw.upper)
    assert np.allclose(pw.lower, curve(est, 0, W))
    assert simultaneous_band(fits, pw).factor == 1.0


def test_too_few_replicates_rejected():
    est, fits = replicate_fits(10, 0)
    with pytest.raises(ValueError, match="at least"):
        pointwise_band(fits, 0, W)
    with pytest.raises(ValueError):
        pointwise_band(replicate_fits(30, 0)[1], 0, W, level=1.5)


def test_simultaneous_band_contains_pointwise_and_recounts():
    est, fits = replicate_fits(200, 3)
    pw = pointwise_band(fits, 0, W, 0.95, estimate=est)
    sim = simultaneous_band(fits, pw)
    assert sim.factor >= 1.0
    assert np.all(sim.lower <= pw.lower + 1e-12) and np.all(sim.upper >= pw.upper - 1e-12)
    links = np.stack([curve_link(f, 0, W) for f in fits])
    cov = band_coverage(links, logit(sim.lower), logit(sim.upper))
    assert 0.95 <= cov <= 0.97


def test_pointwise_band_with_enough_coverage_keeps_unit_factor():
    est, fits = replicate_fits(40, 4)
    pw = pointwise_band(fits, 0, W, 0.95, estimate=est)
    assert simultaneous_band(fits, pw, level=0.5).factor == 1.0


def test_band_csv(tmp_path):
    est, fits = replicate_fits(30, 5)
    pw = pointwise_band(fits, 0, W, estimate=est)
    path = tmp_path / "bands.csv"
    write_band_csv(path, {"survival[1]": (pw, simultaneous_band(fits, pw))})
    rows = list(csv.reader(open(path)))
    assert rows[0] == ["smooth", "w", "estimate", "lo_pointwise", "hi_pointwise",
                       "lo_simultaneous", "hi_simultaneous"]
    assert len(rows) == 1 + W.size


def test_failures_beyond_tolerance_raise(problem, fit, monkeypatch):
    import cjsmooth.uncertainty as unc
    monkeypatch.setattr(unc, "refit", lambda *a, **k: None)
    with pytest.raises(BootstrapFailedError):
        nonparam_bootstrap(problem, None, fit.h_vec, B=5, seed=0, fit=fit)
