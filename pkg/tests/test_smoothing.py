import csv

import numpy as np
import pytest
from scipy.special import expit

from cjsmooth.fit import FitOptions, FitResult
from cjsmooth.model import PackedParams
from cjsmooth.problem import Problem
from cjsmooth.simgen import simulate_heron_shaped
from cjsmooth.smoothing import (AICUnavailableError, CVOptions, SelectionFailedError, _argbest,
                                aic_grid, aic_select, cartesian_grid, kfold_cv_histories, loo_cv_array,
                                max_second_difference, parametric_baseline, spline_start_from_baseline,
                                staged_cv, stratified_partitions)
from cjsmooth.uncertainty import curve
from conftest import constant_covariate_histories, constant_history_spec

T = 7
FAST = CVOptions(fit=FitOptions(restarts=1))


@pytest.fixture(scope="module")
def problem(constant_cov_data):
    return Problem(constant_history_spec(T, "spline_in_covariate", K=8), constant_cov_data)


@pytest.fixture(scope="module")
def heron():
    data, spec, theta = simulate_heron_shaped(T=10, releases=300, seed=4)
    return Problem(spec, data), theta


def test_singleton_grids_return_their_element(problem, heron):
    assert kfold_cv_histories(problem, None, [(4.0,)], k=2, options=FAST).best_h == (4.0,)
    assert aic_grid(None, problem, [(4.0,)], FitOptions(restarts=1)).best_h == (4.0,)
    hp, _ = heron
    assert loo_cv_array(hp, None, [(1.0, 1.0, 1.0)], FAST).best_h == (1.0, 1.0, 1.0)


def test_partitions_sizes_disjoint_and_deterministic():
    strata = np.repeat(np.arange(1, 10), [67, 67, 67, 67, 66, 66, 67, 67, 66])
    assert strata.size == 600
    parts = stratified_partitions(strata, 10, 0.9, seed=3)
    again = stratified_partitions(strata, 10, 0.9, seed=3)
    for (c, v), (c2, v2) in zip(parts, again):
        assert np.array_equal(c, c2) and np.array_equal(v, v2)
        assert np.intersect1d(c, v).size == 0
        assert abs(c.size - 540) <= 9
        for s in range(1, 10):
            n = np.sum(strata == s)
            assert np.sum(strata[c] == s) == round(0.9 * n)
    assert not np.array_equal(parts[0][0], parts[1][0])


@pytest.mark.parametrize("k,frac", [(1, 0.9), (5, 0.0), (5, 1.0)])
def test_partition_arguments_checked(k, frac):
    with pytest.raises(ValueError):
        stratified_partitions(np.arange(10), k, frac, 0)


def test_kfold_is_deterministic_and_returns_grid_member(problem, tmp_path):
    grid = [(0.25,), (16.0,), (1024.0,)]
    a = kfold_cv_histories(problem, None, grid, k=3, seed=5, options=FAST)
    b = kfold_cv_histories(problem, None, grid, k=3, seed=5, options=FAST)
    assert a.best_h == b.best_h and a.best_h in grid
    assert [r["score"] for r in a.table] == [r["score"] for r in b.table]
    path = tmp_path / "scores.csv"
    a.write_csv(path)
    rows = list(csv.reader(open(path)))
    assert rows[0][:4] == ["h_1", "fold", "score", "converged"]
    assert len(rows) == 1 + 3 * 3


def test_nested_grids_do_not_lower_the_best_score(problem):
    small = kfold_cv_histories(problem, None, [(1.0,), (256.0,)], k=3, seed=1, options=FAST)
    big = kfold_cv_histories(problem, None, [(1.0,), (16.0,), (256.0,)], k=3, seed=1, options=FAST)
    assert max(big.scores.values()) >= max(small.scores.values()) - 1e-6


def test_ties_go_to_larger_h():
    assert _argbest({(1.0, 4.0): 2.0, (4.0, 4.0): 2.0, (0.25, 4.0): 1.0}) == (4.0, 4.0)
    assert _argbest({(1.0,): 5.0, (8.0,): 5.0}, larger_is_better=False) == (8.0,)
    with pytest.raises(SelectionFailedError):
        _argbest({(1.0,): None})


def test_cartesian_grid_gate():
    assert len(cartesian_grid([1, 2, 4], 2)) == 9
    with pytest.raises(ValueError, match="staged"):
        cartesian_grid([1, 2], 3)
    assert len(cartesian_grid([1, 2], 3, allow_large=True)) == 8


def test_grid_validation(problem):
    with pytest.raises(ValueError):
        kfold_cv_histories(problem, None, [(1.0, 2.0)], k=2)
    with pytest.raises(ValueError):
        kfold_cv_histories(problem, None, [(-1.0,)], k=2)


def test_regime_checks(problem, heron):
    hp, _ = heron
    with pytest.raises(ValueError):
        loo_cv_array(problem, None, [(1.0,)])
    with pytest.raises(ValueError):
        kfold_cv_histories(hp, None, [(1.0, 1.0, 1.0)])


def test_loo_array_returns_three_vector(heron):
    hp, _ = heron
    grid = cartesian_grid([0.25, 2.0 ** 16], 3, allow_large=True)
    res = loo_cv_array(hp, None, grid[:3], FAST)
    assert len(res.best_h) == 3 and res.best_h in grid
    assert len(res.table) == 3 * (hp.spec.T - 1)


def test_aic_unavailable_when_every_fit_is_singular():
    class Fake:
        converged, aic_p, edf, loglik_unpen = True, None, None, -1.0
    with pytest.raises(AICUnavailableError, match="cross-validation"):
        aic_select({(1.0,): Fake(), (2.0,): Fake()})


def test_staged_with_one_smooth_is_plain_kfold(problem):
    grid = [0.25, 64.0]
    st = staged_cv(problem, None, grid, stages=2, k=3, seed=2, options=FAST)
    kf = kfold_cv_histories(problem, None, [(g,) for g in grid], k=3, seed=2, options=FAST)
    assert st.best_h == kf.best_h
    assert st.baseline is None


def test_baseline_start_reproduces_linear_predictor(problem):
    spec = problem.spec
    base = parametric_baseline(spec)
    theta_b = np.zeros(base.n_params)
    theta_b[base.slice_of("survival[1]")] = [0.3, -0.8]
    theta = spline_start_from_baseline(spec, base, theta_b)
    fr = FitResult(spec, PackedParams(theta, spec.layout), np.array([1.0]), 0, 0, None, None, True, 1, 0)
    w = np.linspace(*spec.block("survival[1]").domain, 40)
    assert np.allclose(curve(fr, 0, w), expit(0.3 - 0.8 * w), atol=1e-12)
    assert max_second_difference(fr.gamma("survival[1]")) < 1e-12


def test_max_second_difference():
    assert max_second_difference([0, 1, 4, 9]) == pytest.approx(2.0)


@pytest.mark.slow
def test_linear_truth_prefers_the_largest_h():
    picks = []
    for rep in range(20):
        hs = constant_covariate_histories(300, 6, seed=100 + rep)
        pr = Problem(constant_history_spec(6, "spline_in_covariate", K=8), hs)
        res = kfold_cv_histories(pr, None, [(1.0,), (2.0 ** 10,)], k=5, seed=rep, options=FAST)
        picks.append(res.best_h == (2.0 ** 10,))
    assert np.mean(picks) >= 0.6
