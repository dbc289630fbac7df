import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from cjsmooth.data import EncounterHistory
from cjsmooth.lik_hmm import CovGrid, build_transition, default_grid, emission, loglik_dataset, loglik_hmm
from cjsmooth.model import AgeClassMap, ModelSpec, ParamBlock, pack, zero_natural
from cjsmooth.problem import resolve_spec
from cjsmooth.simgen import SimConfig, simulate_dataset, simulation_spec
from conftest import random_history
from oracles import gaussian_bin_masses, hmm_path_prob

NAT = {
    "survival[1]": np.array([0.4, 0.8]), "survival[2]": np.array([1.0, -0.6]),
    "recapture": 0.55, "recovery": 0.35,
    "covproc_mu0": -0.3, "covproc_sigma0": 0.7,
    "covproc_mu[1]": 0.5, "covproc_mu[2]": -0.2,
    "covproc_sigma[1]": 0.6, "covproc_sigma[2]": 0.9,
    "covproc_eta[1]": 0.5, "covproc_eta[2]": 1.3,
}


def tiny_spec(T=4, m=3):
    return ModelSpec(
        T=T, regime="hmm_timevarying", age_map=AgeClassMap((1,)),
        blocks=(
            ParamBlock("survival", "logistic_linear_in_covariate", age_class=1),
            ParamBlock("survival", "logistic_linear_in_covariate", age_class=2),
            ParamBlock("recapture"), ParamBlock("recovery"),
            ParamBlock("covproc_mu0"), ParamBlock("covproc_sigma0"),
            ParamBlock("covproc_mu", age_class=1), ParamBlock("covproc_mu", age_class=2),
            ParamBlock("covproc_sigma", age_class=1), ParamBlock("covproc_sigma", age_class=2),
            ParamBlock("covproc_eta", age_class=1), ParamBlock("covproc_eta", age_class=2),
        ),
        hmm_bins=m, hmm_grid=(-2.0, 2.0),
    )


def brute(h, spec, grid, nat):
    edges, mids = grid.edges, grid.midpoints
    cls = lambda t: spec.age_map.class_of(h.age(t))

    def phi_fn(t, j):
        a, b = nat[f"survival[{cls(t)}]"]
        return expit(a + b * mids[j])

    def move(t, j):
        c = cls(t + 1)
        mu, sd, eta = nat[f"covproc_mu[{c}]"], nat[f"covproc_sigma[{c}]"], nat[f"covproc_eta[{c}]"]
        return gaussian_bin_masses(edges, mids[j] + eta * (mu - mids[j]), sd)

    T = spec.T
    p = {t: nat["recapture"] for t in range(2, T + 1)}
    lam = {t: nat["recovery"] for t in range(2, T + 1)}
    f0 = gaussian_bin_masses(edges, nat["covproc_mu0"], nat["covproc_sigma0"])
    return hmm_path_prob(list(h.codes), list(h.covariates), h.first_capture, mids, edges,
                         phi_fn, p, lam, f0, move)


@given(seed=st.integers(0, 100_000), age=st.integers(0, 2), m=st.integers(2, 4))
@settings(max_examples=40, deadline=None)
def test_forward_matches_path_enumeration(seed, age, m):
    spec = tiny_spec(m=m)
    grid = CovGrid(m, -2.0, 2.0)
    rng = np.random.default_rng(seed)
    h = random_history(rng, spec.T)
    h = EncounterHistory(h.codes, h.covariates, age_at_first=age)
    ll = loglik_hmm(h, grid, spec, pack(spec, NAT), density=False)
    assert np.exp(ll) == pytest.approx(brute(h, spec, grid, NAT), rel=1e-10)


def test_transition_rows_sum_to_one_and_dead_states_absorb():
    spec = tiny_spec(m=6)
    grid = CovGrid(6, -2.0, 2.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        G = build_transition(grid, spec, pack(spec, NAT), 1, 2)
    assert np.allclose(G.sum(axis=1), 1.0, atol=1e-14)
    assert np.all(G >= 0)
    assert G[6, 7] == 1.0 and G[7, 7] == 1.0
    phi = expit(0.4 + 0.8 * grid.midpoints)
    assert np.allclose(G[:6, 6], 1 - phi)


def test_narrow_grid_warns():
    spec = tiny_spec(m=5)
    with pytest.warns(UserWarning, match="widening"):
        build_transition(CovGrid(5, -0.5, 0.5), spec, pack(spec, NAT), 2)


def test_emission_rows():
    spec = tiny_spec(m=4)
    grid = CovGrid(4, -2.0, 2.0)
    packed = pack(spec, NAT)
    e = emission(grid, spec, packed, 1, 0.3, 3)
    assert np.allclose(e, [0, 0, 0.55, 0, 0, 0])
    assert np.allclose(emission(grid, spec, packed, 1, None, 3), [0.55] * 4 + [0, 0])
    assert np.allclose(emission(grid, spec, packed, 0, None, 3), [0.45] * 4 + [0.65, 1])
    assert np.allclose(emission(grid, spec, packed, 2, None, 3), [0] * 4 + [0.35, 0])
    with pytest.raises(ValueError):
        emission(grid, spec, packed, 2, 0.3, 3)


def test_empty_dataset_has_zero_loglik():
    spec = tiny_spec()
    assert loglik_dataset([], CovGrid(3, -2, 2), spec, pack(spec, NAT)) == 0.0


def test_permutation_invariance():
    spec = tiny_spec(T=5, m=8)
    grid = CovGrid(8, -2, 2)
    rng = np.random.default_rng(2)
    hs = [random_history(rng, 5) for _ in range(40)]
    packed = pack(spec, NAT)
    a = loglik_dataset(hs, grid, spec, packed)
    b = loglik_dataset([hs[i] for i in rng.permutation(40)], grid, spec, packed)
    assert a == b


def test_history_length_mismatch_rejected():
    spec = tiny_spec(T=4)
    h = EncounterHistory(np.array([1, 0, 0]), np.array([0.1, np.nan, np.nan]))
    with pytest.raises(ValueError, match="occasions"):
        loglik_hmm(h, CovGrid(3, -2, 2), spec, pack(spec, NAT))


def test_grid_refinement_converges():
    cfg = SimConfig(N=150, T=6, seed=3)
    ds = simulate_dataset(cfg)
    base = resolve_spec(simulation_spec(cfg, K=6, m=25), ds.histories)
    packed = pack(base, {**zero_natural(base), **cfg.truth_natural()})
    lo, hi = base.hmm_grid
    vals = {m: loglik_dataset(ds.histories, CovGrid(m, lo, hi), base, packed) for m in (25, 50, 100)}
    assert abs(vals[100] - vals[50]) < abs(vals[50] - vals[25])


def test_default_grid_covers_observations():
    rng = np.random.default_rng(0)
    hs = [random_history(rng, 6) for _ in range(50)]
    g = default_grid(hs, 30)
    w = np.concatenate([h.covariates[np.isfinite(h.covariates)] for h in hs])
    assert g.lo < w.min() and g.hi > w.max() and g.m == 30
