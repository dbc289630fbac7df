import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cjsmooth.data import (DataFormatError, EncounterHistory, MDArrays, first_capture_counts,
                           histories_to_arrays, read_arrays, read_covariate, read_histories, sniff_kind,
                           write_arrays, write_covariate, write_histories)
from conftest import random_history


def H(codes, cov=None, **kw):
    codes = np.asarray(codes)
    if cov is None:
        cov = np.where(codes == 1, 0.5, np.nan)
    return EncounterHistory(codes, np.asarray(cov, float), **kw)


def test_history_properties():
    h = H([0, 1, 0, 1, 2, 0], age_at_first=1)
    assert h.T == 6 and h.first_capture == 2
    assert h.recovered and h.recovery_occasion == 5
    assert h.last_alive == 4
    assert h.age(4) == 3


@pytest.mark.parametrize("codes", [[0, 0, 0], [2, 1, 0], [1, 2, 2], [1, 2, 1], [1, 3, 0]])
def test_invalid_histories_rejected(codes):
    with pytest.raises(ValueError):
        H(codes, cov=np.full(3, np.nan))


def test_aggregation_small_example():
    hs = [H([1, 1, 0, 2]), H([1, 0, 0, 0]), H([0, 1, 0, 1])]
    arr = histories_to_arrays(hs)
    m = np.zeros((3, 4))
    d = np.zeros((3, 3))
    m[0, 0] = 1        # released 1, next seen 2
    d[1, 2] = 1        # released 2, recovered 4
    m[0, 3] = 1        # released 1, never again
    m[1, 2] = 1        # released 2, seen 4
    assert np.array_equal(arr.m_counts, m) and np.array_equal(arr.d_counts, d)
    assert np.array_equal(arr.releases, [2, 2, 0])


@given(seed=st.integers(0, 10_000), T=st.integers(2, 8), n=st.integers(1, 40))
@settings(max_examples=50, deadline=None)
def test_aggregation_conserves_releases(seed, T, n):
    rng = np.random.default_rng(seed)
    hs = [random_history(rng, T) for _ in range(n)]
    arr = histories_to_arrays(hs)
    live_before_T = sum(int(np.sum(h.codes[:-1] == 1)) for h in hs)
    assert arr.releases.sum() == live_before_T
    assert arr.d_counts.sum() == sum(h.recovered for h in hs)


def test_histories_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    hs = [random_history(rng, 6) for _ in range(25)]
    path = tmp_path / "h.csv"
    write_histories(path, hs)
    back = read_histories(path)
    assert sniff_kind(path) == "histories"
    assert len(back) == 25
    for a, b in zip(hs, back):
        assert np.array_equal(a.codes, b.codes)
        assert np.array_equal(a.covariates, b.covariates, equal_nan=True)


def test_arrays_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    arr = histories_to_arrays([random_history(rng, 7) for _ in range(60)])
    arr = MDArrays(arr.m_counts, arr.d_counts, covariate=np.linspace(0, 1, 7))
    mp, dp, cp = tmp_path / "m.csv", tmp_path / "d.csv", tmp_path / "c.csv"
    write_arrays(mp, dp, arr, cp)
    back = read_arrays(mp, dp, cp)
    assert sniff_kind(mp) == "m_array" and sniff_kind(dp) == "d_array"
    assert np.array_equal(back.m_counts, arr.m_counts)
    assert np.array_equal(back.d_counts, arr.d_counts)
    assert np.allclose(back.covariate, arr.covariate)


def test_global_covariate_must_be_finite(tmp_path):
    p = tmp_path / "c.csv"
    write_covariate(p, [1.0, np.nan, 3.5])
    with pytest.raises(DataFormatError, match=":3:"):
        read_covariate(p)


def test_bad_history_file_reports_line(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("id,occ_1,occ_2,cov_1,cov_2\na,1,0,0.1,NA\nb,1,x,0.2,NA\n")
    with pytest.raises(DataFormatError, match=":3:"):
        read_histories(p)


def test_invalid_history_in_file_reports_line(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("id,occ_1,occ_2,cov_1,cov_2\na,0,0,NA,NA\n")
    with pytest.raises(DataFormatError, match=":2:"):
        read_histories(p)


def test_bad_m_array_below_diagonal(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("release,s_2,s_3,never\n1,1,0,2\n2,1,0,0\n")
    with pytest.raises(DataFormatError, match="below the diagonal"):
        read_arrays(p)


def test_md_array_validation():
    with pytest.raises(ValueError):
        MDArrays(np.array([[1.0, -1.0]]))
    with pytest.raises(ValueError):
        MDArrays(np.ones((2, 3)), releases=[1, 1])


def test_first_capture_counts():
    hs = [H([1, 0, 0]), H([0, 1, 0]), H([1, 1, 0])]
    assert first_capture_counts(hs) == {1: 2, 2: 1}
