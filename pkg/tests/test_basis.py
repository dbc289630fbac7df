import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import BSpline

from cjsmooth.basis import (PenaltyVector, SplineBasis, SplineSmooth, build_basis, default_domain,
                            design_matrix, difference_matrix, eval_basis, penalty, penalty_hessian,
                            penalty_preconditioner, predictor)


def scipy_design(basis, w):
    return BSpline.design_matrix(np.asarray(w, float), basis.knots, 3).toarray()


def test_k4_unit_domain_has_eight_unit_spaced_knots():
    b = build_basis(4, 0.0, 1.0)
    assert b.knots.size == 8
    assert np.allclose(np.diff(b.knots), 1.0)
    assert b.knots[3] == 0.0 and b.knots[4] == 1.0


def test_k7_frost_domain():
    b = build_basis(7, 0.0, 57.0)
    assert b.knots.size == 11
    assert b.spacing == pytest.approx(14.25)
    assert b.knots[3] == pytest.approx(0.0) and b.knots[7] == pytest.approx(57.0)


def test_knots_equidistant_and_cover_domain():
    b = build_basis(15, -3.2, 4.1)
    d = np.diff(b.knots)
    assert np.allclose(d, d[0], rtol=1e-12)
    assert b.knots[3] <= b.domain_lo + 1e-12 and b.knots[b.K] >= b.domain_hi - 1e-12


@pytest.mark.parametrize("K,lo,hi", [(3, 0, 1), (7, 1.0, 1.0), (7, 2.0, 1.0)])
def test_invalid_bases_raise(K, lo, hi):
    with pytest.raises(ValueError):
        build_basis(K, lo, hi)


@given(K=st.integers(4, 20), lo=st.floats(-50, 50), span=st.floats(0.1, 100),
       u=st.lists(st.floats(0, 1), min_size=1, max_size=20))
@settings(max_examples=60, deadline=None)
def test_design_matches_scipy_and_partitions_unity(K, lo, span, u):
    b = build_basis(K, lo, lo + span)
    w = lo + span * np.asarray(u) * (1 - 1e-12)
    B = design_matrix(b, w)
    assert np.allclose(B, scipy_design(b, w), atol=1e-12)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(B >= -1e-15)


def test_right_endpoint_matches_left_limit():
    b = build_basis(9, 0.0, 1.0)
    assert np.allclose(eval_basis(b, 1.0), scipy_design(b, [1.0 - 1e-13])[0], atol=1e-10)


def test_values_outside_domain_are_clamped():
    b = build_basis(6, 0.0, 2.0)
    assert np.allclose(eval_basis(b, -5.0), eval_basis(b, 0.0))
    assert np.allclose(eval_basis(b, 9.0), eval_basis(b, 2.0))


def test_nonfinite_evaluation_raises():
    b = build_basis(6, 0.0, 2.0)
    with pytest.raises(ValueError):
        eval_basis(b, np.nan)


def test_greville_coefficients_reproduce_affine_functions():
    b = build_basis(12, -1.0, 3.0)
    g = 0.7 - 1.3 * b.greville()
    w = np.linspace(-1, 3, 101)
    assert np.allclose(design_matrix(b, w) @ g, 0.7 - 1.3 * w, atol=1e-12)


def test_penalty_zero_for_linear_coefficients():
    b = build_basis(10, 0, 1)
    s = SplineSmooth(b, 2.0 + 0.5 * np.arange(10), h=1e6)
    assert penalty(PenaltyVector([s])) == pytest.approx(0.0, abs=1e-9)


def test_penalty_value_and_hessian():
    b = build_basis(6, 0, 1)
    g = np.array([0.0, 1.0, 0.0, 2.0, 0.0, 0.0])
    s1, s2 = SplineSmooth(b, g, h=3.0), SplineSmooth(b, -g, h=0.5)
    pv = PenaltyVector([s1, s2])
    d = g[2:] - 2 * g[1:-1] + g[:-2]
    assert penalty(pv) == pytest.approx(0.5 * 3.5 * d @ d)
    H = penalty_hessian(pv)
    x = np.concatenate([g, -g])
    assert 0.5 * x @ H @ x == pytest.approx(penalty(pv))


def test_difference_matrix_orders():
    assert np.array_equal(difference_matrix(4, 1), [[-1, 1, 0, 0], [0, -1, 1, 0], [0, 0, -1, 1]])
    assert np.array_equal(difference_matrix(4, 2), [[1, -2, 1, 0], [0, 1, -2, 1]])


@pytest.mark.parametrize("bad", [dict(gamma=np.zeros(5)), dict(h=-1.0), dict(diff_order=4)])
def test_smooth_validation(bad):
    b = build_basis(6, 0, 1)
    kw = dict(gamma=np.zeros(6), h=1.0, diff_order=2)
    kw.update(bad)
    with pytest.raises(ValueError):
        SplineSmooth(b, **kw)


def test_penalty_vector_length_checked():
    s = SplineSmooth(build_basis(6, 0, 1), np.zeros(6))
    with pytest.raises(ValueError):
        PenaltyVector([s], h_vec=[1.0, 2.0])


def test_predictor_scalar_and_vector():
    b = build_basis(6, 0, 1)
    s = SplineSmooth(b, np.ones(6))
    assert predictor(s, 0.3) == pytest.approx(1.0)
    assert np.allclose(predictor(s, [0.1, 0.9]), 1.0)


@pytest.mark.parametrize("h", [0.0, 1.0, 2.0 ** 30])
def test_preconditioner_bounds_penalty_curvature(h):
    K = 15
    M = penalty_preconditioner(K, h)
    D = difference_matrix(K)
    ev = np.linalg.eigvalsh(M.T @ (h * D.T @ D) @ M)
    assert ev.max() < 1.0 + 1e-9
    assert np.linalg.matrix_rank(M) == K


def test_default_domain_extends_range():
    assert default_domain([0.0, 10.0]) == pytest.approx((-0.5, 10.5))
    with pytest.raises(ValueError):
        default_domain([np.nan])
