"""
Approximate likelihood for individual covariates that evolve stochastically.

The covariate range is cut into ``m`` equal bins.  The hidden state is
``alive in bin j`` (``j = 0..m-1``), ``recently dead`` (index ``m``) or
``long dead`` (index ``m + 1``).  Transition probabilities between alive bins
integrate the Gaussian mean-reverting step over each bin, evaluated from the
bin midpoint; mass falling outside the grid is folded into the boundary bins.

An observed covariate value restricts the alive states to the bin containing
it.  By default each observed value also contributes ``-log(bin width)`` so
that log-likelihoods approximate a density and stay comparable across ``m``;
this constant does not depend on the parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import ndtr
from scipy.stats import norm

from .basis import design_matrix
from .data import EncounterHistory
from .model import ModelSpec, PackedParams, block_prob, covproc_params

NEG_INF = -np.inf


@dataclass(frozen=True)
class CovGrid:
    m: int
    lo: float
    hi: float

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("grid needs at least 2 bins")
        if not self.lo < self.hi:
            raise ValueError(f"degenerate grid [{self.lo}, {self.hi}]")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.m + 1)

    @property
    def midpoints(self) -> np.ndarray:
        e = self.edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.m

    def bin_of(self, w):
        """0-based bin index; NaN maps to -1, values off the grid clamp to the ends."""
        w = np.asarray(w, dtype=float)
        idx = np.floor((w - self.lo) / self.width)
        idx = np.clip(np.nan_to_num(idx, nan=-1.0), 0, self.m - 1).astype(int)
        return np.where(np.isfinite(w), idx, -1)


def default_grid(histories, m: int, n_sd: float = 3.0) -> CovGrid:
    """Observed range widened by ``n_sd`` pooled SDs of one-step increments.

    Increments are grouped by the age of the individual at the later
    occasion; the SD pools the within-group deviations.
    """
    vals, groups = [], {}
    for h in histories:
        w = h.covariates
        vals.append(w[np.isfinite(w)])
        ok = np.isfinite(w[1:]) & np.isfinite(w[:-1])
        for t in np.flatnonzero(ok):
            age = int(h.age(t + 2))
            groups.setdefault(age, []).append(w[t + 1] - w[t])
    vals = np.concatenate(vals) if vals else np.array([])
    if vals.size == 0:
        raise ValueError("no observed covariate values to build a grid")
    ss, dof = 0.0, 0
    for inc in groups.values():
        inc = np.asarray(inc)
        if inc.size > 1:
            ss += float(((inc - inc.mean()) ** 2).sum())
            dof += inc.size - 1
    sd = np.sqrt(ss / dof) if dof > 0 else float(np.std(vals)) or 1.0
    return CovGrid(int(m), float(vals.min() - n_sd * sd), float(vals.max() + n_sd * sd))


# ---------------------------------------------------------------------------
# kernels


def transition_kernel(edges, mids, phi_mid, mu, sigma, eta):
    """(m+2) x (m+2) transition matrix for one (survival class, covariate class) pair."""
    m = mids.shape[0]
    mean = mids + eta * (mu - mids)
    cdf = ndtr((edges[None, 1:-1] - mean[:, None]) / sigma)
    cdf = jnp.concatenate([jnp.zeros((m, 1)), cdf, jnp.ones((m, 1))], axis=1)
    move = jnp.diff(cdf, axis=1)
    top = jnp.concatenate(
        [phi_mid[:, None] * move, (1.0 - phi_mid)[:, None], jnp.zeros((m, 1))], axis=1
    )
    rd = jnp.zeros(m + 2).at[m + 1].set(1.0)
    return jnp.concatenate([top, rd[None, :], rd[None, :]], axis=0)


def initial_kernel(edges, mu0, sigma0):
    """Bin masses of N(mu0, sigma0^2) with tails folded into the end bins."""
    cdf = ndtr((edges[1:-1] - mu0) / sigma0)
    cdf = jnp.concatenate([jnp.zeros(1), cdf, jnp.ones(1)])
    return jnp.diff(cdf)


def emission_kernel(code, obsbin, p_t, lam_t, m):
    """Emission rows, shape (N, m+2), for codes/bins/rates of shape (N,)."""
    bins = jnp.arange(m)[None, :]
    in_bin = jnp.where(obsbin[:, None] >= 0, bins == obsbin[:, None], True)
    c = code[:, None]
    alive = jnp.where(c == 1, p_t[:, None] * in_bin, jnp.where(c == 0, 1.0 - p_t[:, None], 0.0))
    rd = jnp.where(code == 2, lam_t, jnp.where(code == 0, 1.0 - lam_t, 0.0))
    ld = jnp.where(code == 0, 1.0, 0.0)
    return jnp.concatenate([alive, rd[:, None], ld[:, None]], axis=1)


def forward_kernel(alpha0, trans, step_kinds, kind, active, code, obsbin, p_t, lam_t):
    """Scaled forward algorithm, aligned on steps since first capture.

    ``trans`` stacks one transition matrix per kind; ``step_kinds`` is a static
    tuple listing the kinds used at each step.  Arrays ``kind``, ``active``,
    ``code``, ``obsbin``, ``p_t``, ``lam_t`` have shape (U, N).
    Returns per-individual log-likelihood contributions of the steps.
    """
    m = alpha0.shape[1] - 2
    alpha = alpha0
    ll = jnp.zeros(alpha0.shape[0])
    for u, kinds in enumerate(step_kinds):
        if len(kinds) == 1:
            moved = alpha @ trans[kinds[0]]
        else:
            moved = sum(
                jnp.where((kind[u] == k)[:, None], alpha @ trans[k], 0.0) for k in kinds
            )
        a = moved * emission_kernel(code[u], obsbin[u], p_t[u], lam_t[u], m)
        s = a.sum(axis=1)
        act = active[u]
        ok = act & (s > 0)
        alpha = jnp.where(act[:, None], a / jnp.where(ok, s, 1.0)[:, None], alpha)
        ll = ll + jnp.where(act, jnp.log(jnp.where(act, s, 1.0)), 0.0)
    return ll


# ---------------------------------------------------------------------------
# data preparation


def transition_kinds(spec: ModelSpec) -> tuple:
    """All (survival class, covariate class) pairs reachable in one step."""
    nc = spec.age_map.n_classes
    kinds = [(c, c) for c in range(1, nc + 1)] + [(c, c + 1) for c in range(1, nc)]
    return tuple(kinds)


def prepare_histories(histories, spec: ModelSpec, grid: CovGrid):
    """Numpy arrays and the static step structure for the forward kernel."""
    T = spec.T
    N = len(histories)
    U = T - 1
    kinds = transition_kinds(spec)
    kind_index = {k: i for i, k in enumerate(kinds)}
    age_map = spec.age_map
    for h in histories:
        if h.T != T:
            raise ValueError(f"history {h.id!r} has {h.T} occasions, model has {T}")
        bad = np.isfinite(h.covariates) & (h.codes != 1)
        if bad.any():
            raise ValueError(f"history {h.id!r}: covariate recorded without a live capture")
    first = np.array([h.first_capture for h in histories], dtype=int)
    codes = np.stack([h.codes for h in histories])
    covs = np.stack([h.covariates for h in histories])
    a0 = np.array([h.age_at_first for h in histories], dtype=int)
    obs_all = grid.bin_of(covs)
    rows = np.arange(N)
    obs0 = obs_all[rows, first - 1]

    u = np.arange(1, U + 1)[:, None]
    t = first[None, :] + u                       # occasion at step u
    active = t <= T
    tc = np.clip(t, 1, T)
    code = np.where(active, codes[rows[None, :], tc - 1], 0)
    obsbin = np.where(active, obs_all[rows[None, :], tc - 1], -1)
    age_prev = a0[None, :] + u - 1
    cls_prev = age_map.class_of(age_prev)
    cls_next = age_map.class_of(age_prev + 1)
    kind = np.vectorize(lambda a, b: kind_index[(a, b)])(cls_prev, cls_next).astype(int)
    step_kinds = []
    for k in range(U):
        present = np.unique(kind[k][active[k]])
        step_kinds.append(tuple(int(x) for x in present) or (0,))
    n_obs = (obs0 >= 0).astype(float) + ((obsbin >= 0) & active).sum(axis=0)
    arrays = {
        "obs0": obs0,
        "t": tc,
        "active": active,
        "code": code,
        "obsbin": obsbin,
        "kind": kind,
        "n_obs": n_obs,
    }
    return arrays, tuple(step_kinds)


@lru_cache(maxsize=64)
def _survival_designs(spec: ModelSpec, grid: CovGrid):
    mids = grid.midpoints
    out = []
    for a in range(1, spec.age_map.n_classes + 1):
        b = spec.block(f"survival[{a}]")
        out.append(design_matrix(b.basis, mids) if b.form == "spline_in_covariate" else None)
    return tuple(out)


def hmm_units_loglik(theta, arrays, spec: ModelSpec, grid: CovGrid, step_kinds, density=True):
    """Per-individual log-likelihood (jax-traceable in ``theta``)."""
    m = grid.m
    edges = jnp.asarray(grid.edges)
    mids = jnp.asarray(grid.midpoints)
    T = spec.T
    cp = covproc_params(spec, theta)
    designs = _survival_designs(spec, grid)
    phi_mid = []
    for a in range(1, spec.age_map.n_classes + 1):
        key = f"survival[{a}]"
        b = spec.block(key)
        phi_mid.append(
            block_prob(b, theta[spec.slice_of(key)], T, w=mids, B=designs[a - 1], shape=(m,))
        )
    trans = jnp.stack([
        transition_kernel(edges, mids, phi_mid[cs - 1], cp["mu"][cn - 1], cp["sigma"][cn - 1], cp["eta"][cn - 1])
        for cs, cn in transition_kinds(spec)
    ])
    occ = np.arange(1, T + 1)
    p_occ = block_prob(spec.block("recapture"), theta[spec.slice_of("recapture")], T, t=occ, shape=(T,))
    l_occ = block_prob(spec.block("recovery"), theta[spec.slice_of("recovery")], T, t=occ, shape=(T,))
    t_idx = arrays["t"] - 1
    p_t, lam_t = p_occ[t_idx], l_occ[t_idx]

    f0 = initial_kernel(edges, cp["mu0"], cp["sigma0"])
    obs0 = arrays["obs0"]
    N = obs0.shape[0]
    onehot = jnp.arange(m)[None, :] == obs0[:, None]
    alive0 = jnp.where(obs0[:, None] >= 0, onehot * f0[None, :], f0[None, :])
    s0 = alive0.sum(axis=1)
    alpha0 = jnp.concatenate([alive0 / jnp.where(s0 > 0, s0, 1.0)[:, None], jnp.zeros((N, 2))], axis=1)
    ll = jnp.log(s0)
    ll = ll + forward_kernel(
        alpha0, trans, step_kinds, arrays["kind"], arrays["active"],
        arrays["code"], arrays["obsbin"], p_t, lam_t,
    )
    if density:
        ll = ll - arrays["n_obs"] * np.log(grid.width)
    return ll


# ---------------------------------------------------------------------------
# public numpy API


def _theta(packed):
    return packed.theta if isinstance(packed, PackedParams) else np.asarray(packed, float)


def build_transition(grid: CovGrid, spec: ModelSpec, packed, age_class: int,
                     next_class: int | None = None) -> np.ndarray:
    """Transition matrix from an individual in ``age_class`` at ``t-1``.

    Survival uses ``age_class``; the covariate step uses ``next_class``
    (defaults to ``age_class``), the class at ``t``.
    """
    theta = jnp.asarray(_theta(packed))
    nxt = age_class if next_class is None else next_class
    cp = covproc_params(spec, theta)
    key = f"survival[{age_class}]"
    b = spec.block(key)
    mids = grid.midpoints
    B = design_matrix(b.basis, mids) if b.form == "spline_in_covariate" else None
    phi_mid = block_prob(b, theta[spec.slice_of(key)], spec.T, w=mids, B=B, shape=(grid.m,))
    mu, sd, eta = (float(cp[k][nxt - 1]) for k in ("mu", "sigma", "eta"))
    mean = mids + eta * (mu - mids)
    tail = norm.cdf((grid.lo - mean) / sd) + norm.sf((grid.hi - mean) / sd)
    if np.max(tail) > 0.01:
        warnings.warn(
            f"covariate grid [{grid.lo:.3g}, {grid.hi:.3g}] loses up to {np.max(tail):.3f} "
            "transition mass beyond its ends; consider widening it",
            stacklevel=2,
        )
    G = transition_kernel(jnp.asarray(grid.edges), jnp.asarray(mids), phi_mid, mu, sd, eta)
    return np.asarray(G)


def emission(grid: CovGrid, spec: ModelSpec, packed, code: int, cov_obs, t: int) -> np.ndarray:
    if code not in (0, 1, 2):
        raise ValueError(f"invalid observation code {code}")
    observed = cov_obs is not None and np.isfinite(cov_obs)
    if observed and code != 1:
        raise ValueError("covariate value recorded without a live capture")
    theta = jnp.asarray(_theta(packed))
    occ = np.array([t])
    p_t = block_prob(spec.block("recapture"), theta[spec.slice_of("recapture")], spec.T, t=occ, shape=(1,))
    l_t = block_prob(spec.block("recovery"), theta[spec.slice_of("recovery")], spec.T, t=occ, shape=(1,))
    obsbin = grid.bin_of(np.array([cov_obs if observed else np.nan]))
    e = emission_kernel(jnp.array([code]), jnp.asarray(obsbin), p_t, l_t, grid.m)
    return np.asarray(e[0])


def loglik_dataset(histories, grid: CovGrid, spec: ModelSpec, packed, density: bool = True) -> float:
    if len(histories) == 0:
        return 0.0
    arrays, step_kinds = prepare_histories(histories, spec, grid)
    ll = hmm_units_loglik(jnp.asarray(_theta(packed)), arrays, spec, grid, step_kinds, density)
    ll = np.asarray(ll)
    if not np.all(np.isfinite(ll)):
        return NEG_INF
    return float(_pairwise_sum(ll))


def loglik_hmm(hist: EncounterHistory, grid: CovGrid, spec: ModelSpec, packed, density: bool = True) -> float:
    return loglik_dataset([hist], grid, spec, packed, density)


def _pairwise_sum(x: np.ndarray) -> float:
    # np.sum reduces pairwise; sorting fixes the order so permutations agree exactly
    return float(np.sum(np.sort(np.asarray(x, dtype=float))))
