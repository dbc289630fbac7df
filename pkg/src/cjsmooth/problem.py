"""
A dataset bound to a model: data arrays prepared once, compiled likelihood
functions shared by every fit on data of the same shape.

Each regime is expressed as a vector of per-unit log-likelihoods (release
rows for m-/d-arrays, individuals for histories).  Fits take nonnegative
unit weights, which is how cross-validation folds and nonparametric
bootstrap resamples are represented without recompiling anything.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache

import jax
import jax.numpy as jnp
import numpy as np

from .basis import default_domain, design_matrix
from .data import EncounterHistory, MDArrays
from .lik_array import cell_probs_kernel, history_covariates, history_kernel, loglik_rows_kernel
from .lik_hmm import CovGrid, default_grid, hmm_units_loglik, prepare_histories
from .model import ModelSpec, block_prob, penalty_value

HESSIAN_BLOCK = 16


def resolve_spec(spec: ModelSpec, data) -> ModelSpec:
    """Fill in data-dependent defaults: spline domains and the covariate grid."""
    blocks = list(spec.blocks)
    grid_range = spec.hmm_grid
    if spec.regime == "hmm_timevarying" and grid_range is None:
        g = default_grid(data, spec.hmm_bins)
        grid_range = (g.lo, g.hi)
    for i, b in enumerate(blocks):
        if b.form != "spline_in_covariate" or b.domain is not None:
            continue
        if spec.regime == "hmm_timevarying":
            dom = grid_range
        elif spec.regime == "array_global":
            if data.covariate is None:
                raise ValueError("covariate-driven survival needs a global covariate series")
            dom = default_domain(data.covariate)
        else:
            dom = default_domain(np.concatenate([h.covariates for h in data]))
        blocks[i] = replace(b, domain=tuple(dom))
    return replace(spec, blocks=tuple(blocks), hmm_grid=grid_range)


# ---------------------------------------------------------------------------
# per-regime unit log-likelihoods (jax-traceable)


def _survival_by_class(spec, theta, t, w, designs):
    T = spec.T
    out = []
    for a in range(1, spec.age_map.n_classes + 1):
        key = f"survival[{a}]"
        out.append(block_prob(spec.block(key), theta[spec.slice_of(key)], T,
                              t=t, w=w, B=designs.get(a), shape=np.shape(t)))
    return jnp.stack(out)


def _rate_occ(spec, theta, role):
    occ = np.arange(1, spec.T + 1)
    return block_prob(spec.block(role), theta[spec.slice_of(role)], spec.T, t=occ, shape=(spec.T,))


def _array_rates(theta, arr, spec):
    """Row-wise ``(T-1, T)`` rate arrays; row ``r-1`` is the release cohort ``r``."""
    T = spec.T
    occ = np.arange(1, T + 1)
    phi_cls = _survival_by_class(spec, theta, occ, arr["w"], arr["designs"])     # (nc, T)
    phi = phi_cls[arr["cls"] - 1, np.arange(T)[None, :]]                          # (T-1, T)
    p = jnp.broadcast_to(_rate_occ(spec, theta, "recapture"), (T - 1, T))
    lam = jnp.broadcast_to(_rate_occ(spec, theta, "recovery"), (T - 1, T))
    return phi, p, lam


def _array_units(theta, arr, spec):
    return loglik_rows_kernel(arr["m"], arr["d"], *_array_rates(theta, arr, spec))


def _history_units(theta, arr, spec):
    T = spec.T
    t = np.broadcast_to(np.arange(1, T + 1), arr["w"].shape)
    phi_cls = _survival_by_class(spec, theta, t, arr["w"], arr["designs"])       # (nc, N, T)
    N = arr["w"].shape[0]
    phi = phi_cls[arr["cls"] - 1, np.arange(N)[:, None], np.arange(T)[None, :]]
    p = jnp.broadcast_to(_rate_occ(spec, theta, "recapture"), (N, T))
    lam = jnp.broadcast_to(_rate_occ(spec, theta, "recovery"), (N, T))
    return history_kernel(phi, p, lam, arr["first"], arr["last"], arr["recovered"], arr["seen"])


def _prepare_array(spec: ModelSpec, data: MDArrays):
    T = spec.T
    if data.T != T:
        raise ValueError(f"data have {data.T} occasions, model has {T}")
    r = np.arange(1, T)[:, None]
    t = np.arange(1, T + 1)[None, :]
    cls = spec.age_map.class_of(np.maximum(t - r, 0))
    w = data.covariate if data.covariate is not None else np.zeros(T)
    designs = {}
    for a in range(1, spec.age_map.n_classes + 1):
        b = spec.block(f"survival[{a}]")
        if b.form == "spline_in_covariate":
            designs[a] = design_matrix(b.basis, w)
    arrays = {"m": data.m_counts, "d": data.d_counts, "w": np.asarray(w, float),
              "cls": cls, "designs": designs}
    return arrays, ()


def _prepare_histories_constant(spec: ModelSpec, histories):
    T = spec.T
    for h in histories:
        if h.T != T:
            raise ValueError(f"history {h.id!r} has {h.T} occasions, model has {T}")
    w = np.stack([history_covariates(h) for h in histories])
    if spec.uses_covariate:
        first = np.array([h.first_capture for h in histories])
        after = np.arange(1, T + 1)[None, :] >= first[:, None]
        if np.any(after & ~np.isfinite(w)):
            bad = histories[int(np.flatnonzero((after & ~np.isfinite(w)).any(1))[0])]
            raise ValueError(f"history {bad.id!r} has no covariate value")
    w = np.nan_to_num(w, nan=0.0)
    ages = np.stack([np.maximum(h.age(np.arange(1, T + 1)), 0) for h in histories])
    designs = {}
    for a in range(1, spec.age_map.n_classes + 1):
        b = spec.block(f"survival[{a}]")
        if b.form == "spline_in_covariate":
            designs[a] = design_matrix(b.basis, w)
    arrays = {
        "w": w,
        "cls": spec.age_map.class_of(ages),
        "designs": designs,
        "first": np.array([h.first_capture for h in histories]),
        "last": np.array([h.last_alive for h in histories]),
        "recovered": np.array([h.recovered for h in histories]),
        "seen": np.stack([h.codes == 1 for h in histories]),
    }
    return arrays, ()


# ---------------------------------------------------------------------------
# compiled functions


@dataclass(frozen=True)
class _Compiled:
    units: object
    total: object
    value_and_grad: object
    hessian: object


@lru_cache(maxsize=32)
def _compile(spec: ModelSpec, static: tuple, grid: CovGrid | None) -> _Compiled:
    if spec.regime == "array_global":
        def units(theta, arr):
            return _array_units(theta, arr, spec)
    elif spec.regime == "history_constant":
        def units(theta, arr):
            return _history_units(theta, arr, spec)
    else:
        def units(theta, arr):
            return hmm_units_loglik(theta, arr, spec, grid, static)

    def total(theta, arr, weights):
        ll = units(theta, arr)
        return jnp.sum(jnp.where(weights > 0, weights * ll, 0.0))

    def objective(theta, arr, weights, h):
        return total(theta, arr, weights) - penalty_value(spec, theta, h)

    grad_total = jax.grad(total)

    def hessian_columns(theta, arr, weights, V):
        # Hessian-vector products for a fixed-size block of directions
        hvp = lambda v: jax.jvp(lambda th: grad_total(th, arr, weights), (theta,), (v,))[1]
        return jax.vmap(hvp)(V)

    return _Compiled(
        units=jax.jit(units),
        total=jax.jit(total),
        value_and_grad=jax.jit(jax.value_and_grad(objective)),
        hessian=jax.jit(hessian_columns),
    )


class Problem:
    """Model plus data, ready for repeated likelihood evaluation."""

    def __init__(self, spec: ModelSpec, data):
        self.spec = resolve_spec(spec, data)
        self.data = data
        spec = self.spec
        self.grid = None
        if spec.regime == "array_global":
            if not isinstance(data, MDArrays):
                raise ValueError("array_global regime needs m-/d-array data")
            arrays, static = _prepare_array(spec, data)
            self.strata = None
        else:
            data = list(data)
            if not data or not isinstance(data[0], EncounterHistory):
                raise ValueError(f"{spec.regime} regime needs encounter histories")
            self.data = data
            if spec.regime == "history_constant":
                arrays, static = _prepare_histories_constant(spec, data)
            else:
                self.grid = CovGrid(spec.hmm_bins, *spec.hmm_grid)
                arrays, static = prepare_histories(data, spec, self.grid)
            self.strata = np.array([h.first_capture for h in data])
        self._static = static
        self.arrays = jax.tree_util.tree_map(jnp.asarray, arrays)
        self.n_units = int(
            spec.T - 1 if spec.regime == "array_global" else len(self.data)
        )
        self._fns = _compile(spec, static, self.grid)

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    def _weights(self, weights):
        if weights is None:
            return jnp.ones(self.n_units)
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.n_units,) or np.any(w < 0):
            raise ValueError(f"weights must be {self.n_units} nonnegative values")
        return jnp.asarray(w)

    def unit_loglik(self, theta) -> np.ndarray:
        return np.asarray(self._fns.units(jnp.asarray(theta, float), self.arrays))

    def loglik(self, theta, weights=None) -> float:
        v = float(self._fns.total(jnp.asarray(theta, float), self.arrays, self._weights(weights)))
        return v if not np.isnan(v) else -np.inf

    def penalty(self, theta, h_vec) -> float:
        return float(penalty_value(self.spec, jnp.asarray(theta, float), jnp.asarray(h_vec, float)))

    def penalized(self, theta, h_vec, weights=None) -> float:
        return self.loglik(theta, weights) - self.penalty(theta, h_vec)

    def value_and_grad(self, theta, h_vec, weights=None):
        v, g = self._fns.value_and_grad(
            jnp.asarray(theta, float), self.arrays, self._weights(weights), jnp.asarray(h_vec, float)
        )
        return float(v), np.asarray(g)

    def hessian(self, theta, weights=None) -> np.ndarray:
        """Hessian of the unpenalized log-likelihood."""
        theta = jnp.asarray(theta, float)
        w = self._weights(weights)
        n = theta.shape[0]
        eye = np.eye(n)
        # blocks of at most HESSIAN_BLOCK directions bound memory on large HMM problems
        size = min(HESSIAN_BLOCK, n)
        blocks = []
        for start in range(0, n, size):
            V = np.zeros((size, n))
            rows = eye[start:start + size]
            V[: rows.shape[0]] = rows
            blocks.append(np.asarray(self._fns.hessian(theta, self.arrays, w, jnp.asarray(V)))[: rows.shape[0]])
        H = np.concatenate(blocks, axis=0)
        return 0.5 * (H + H.T)

    def cell_probs(self, theta):
        """Row-wise m-/d-array cell probabilities at ``theta`` (array regime only)."""
        if self.spec.regime != "array_global":
            raise ValueError("cell probabilities are defined for the array regime only")
        rates = _array_rates(jnp.asarray(theta, float), self.arrays, self.spec)
        q_m, q_d = cell_probs_kernel(*rates)
        return np.asarray(q_m), np.asarray(q_d)

    def with_arrays(self, data: MDArrays) -> "Problem":
        """Same model on new m-/d-array counts (shapes unchanged)."""
        return Problem(self.spec, data)
