"""
Multinomial m-/d-array likelihood and per-history likelihood.

Rate arrays are occasion-indexed: entry ``t - 1`` holds the value for
occasion ``t``.  Survival ``phi_t`` is used for ``t = 1..T-1``; recapture
``p_t`` and recovery ``lambda_t`` for ``t = 2..T``.  Kernels accept a leading
batch axis so each release row (or individual) can carry its own rates.
"""

from __future__ import annotations

import jax
import jax.numpy as jnp
import numpy as np

from .data import EncounterHistory, MDArrays
from .model import ModelSpec, rates_at

NEG_INF = -np.inf


def _safe_log(x, mask):
    """log(x) where mask holds, 0 elsewhere, without NaN gradients."""
    return jnp.where(mask, jnp.log(jnp.where(mask, x, 1.0)), 0.0)


def chi_kernel(phi, p, lam):
    """Backward recursion for the never-seen-again probabilities, shape (..., T)."""
    T = phi.shape[-1]
    chi = [jnp.ones(phi.shape[:-1])]
    for r in range(T - 1, 0, -1):
        # occasion r uses phi_r, p_{r+1}, lambda_{r+1}, chi_{r+1}
        f, pn, ln = phi[..., r - 1], p[..., r], lam[..., r]
        chi.append((1.0 - f) * (1.0 - ln) + f * (1.0 - pn) * chi[-1])
    return jnp.stack(chi[::-1], axis=-1)


def cell_probs_kernel(phi, p, lam):
    """Row-wise cell probabilities.

    ``phi``, ``p``, ``lam`` have shape ``(T-1, T)``: row ``r-1`` holds the
    rates faced by individuals released at occasion ``r``.  Returns
    ``q_m`` of shape ``(T-1, T)`` (last column = chi_r) and ``q_d`` of shape
    ``(T-1, T-1)``.
    """
    R, T = phi.shape
    rows = jnp.arange(1, R + 1)[:, None]          # release occasion r
    occ = jnp.arange(1, T)[None, :]               # t = 1..T-1
    # log[phi_t (1 - p_{t+1})], kept only for t >= r
    step = jnp.log(phi[:, :-1]) + jnp.log1p(-p[:, 1:])
    step = jnp.where(occ >= rows, step, 0.0)
    csum = jnp.cumsum(step, axis=1)
    # prefix for s = r+1..T is the sum over t = r..s-2 -> csum[:, s-3] (0 when s = r+1)
    prefix = jnp.concatenate([jnp.zeros((R, 1)), csum[:, :-1]], axis=1)   # index s-2
    s = jnp.arange(2, T + 1)[None, :]
    valid = s >= rows + 1
    phi_prev = phi[:, :-1]          # phi_{s-1}
    p_s, lam_s = p[:, 1:], lam[:, 1:]
    pre = jnp.where(valid, jnp.exp(prefix), 0.0)
    q_m = pre * phi_prev * p_s
    q_d = pre * (1.0 - phi_prev) * lam_s
    chi = chi_kernel(phi, p, lam)
    chi_r = chi[jnp.arange(R), jnp.arange(R)]
    return jnp.concatenate([q_m, chi_r[:, None]], axis=1), q_d


def loglik_rows_kernel(m, d, phi, p, lam):
    """Per-release-row multinomial log-likelihood (constants dropped)."""
    q_m, q_d = cell_probs_kernel(phi, p, lam)
    lm = jnp.where(m > 0, m * _safe_log(q_m, m > 0), 0.0)
    ld = jnp.where(d > 0, d * _safe_log(q_d, d > 0), 0.0)
    return lm.sum(axis=1) + ld.sum(axis=1)


def history_kernel(phi, p, lam, first, last, recovered, seen):
    """Per-individual log-likelihood for individual-specific rate sequences.

    ``phi``, ``p``, ``lam``, ``seen`` have shape (N, T); ``first``/``last`` are
    1-based occasions; ``recovered`` is boolean.
    """
    N, T = phi.shape
    occ = jnp.arange(1, T + 1)[None, :]
    alive_step = (occ >= first[:, None]) & (occ <= last[:, None] - 1)
    # step r contributes log phi_r + log p_{r+1} or log(1 - p_{r+1})
    p_next = jnp.concatenate([p[:, 1:], jnp.ones((N, 1))], axis=1)
    seen_next = jnp.concatenate([seen[:, 1:], jnp.zeros((N, 1), bool)], axis=1)
    obs = jnp.where(seen_next, p_next, 1.0 - p_next)
    ll = (_safe_log(phi, alive_step) + _safe_log(obs, alive_step)).sum(axis=1)
    idx = jnp.arange(N)
    l0 = last - 1
    chi = chi_kernel(phi, p, lam)
    lam_next = lam[idx, jnp.clip(l0 + 1, 0, T - 1)]
    dead_term = jnp.log(jnp.where(recovered, (1.0 - phi[idx, l0]) * lam_next, 1.0))
    nseen_term = jnp.log(jnp.where(recovered, 1.0, chi[idx, l0]))
    return ll + jnp.where(recovered, dead_term, nseen_term)


_cell_probs_jit = jax.jit(cell_probs_kernel)
_chi_jit = jax.jit(chi_kernel)
_rows_jit = jax.jit(loglik_rows_kernel)
_history_jit = jax.jit(history_kernel)


# ---------------------------------------------------------------------------
# public numpy API


def _occasion_vectors(phi, p, lam, T):
    phi = np.asarray(phi, dtype=float).ravel()
    p = np.asarray(p, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float).ravel()
    if phi.size == T - 1:
        phi = np.append(phi, np.nan)
    if p.size == T - 1:
        p = np.insert(p, 0, np.nan)
    if lam.size == T - 1:
        lam = np.insert(lam, 0, np.nan)
    for name, v in (("phi", phi), ("p", p), ("lambda", lam)):
        if v.size != T:
            raise ValueError(f"{name} has {v.size} entries; expected {T - 1} or {T}")
    used = [phi[:-1], p[1:], lam[1:]]
    for name, v in zip(("phi", "p", "lambda"), used):
        if not np.all((v >= 0) & (v <= 1)):
            raise ValueError(f"{name} must lie in [0, 1]")
    # placeholders are never read by the kernels; zero them to keep NaN out
    phi = np.where(np.isfinite(phi), phi, 0.5)
    p = np.where(np.isfinite(p), p, 0.5)
    lam = np.where(np.isfinite(lam), lam, 0.5)
    return phi, p, lam


def chi(phi, p, lam, T: int) -> np.ndarray:
    """Probabilities ``chi_1..chi_T`` of never being encountered after ``r``.

    ``phi`` is given for occasions ``1..T-1`` (or ``1..T``); ``p`` and ``lam``
    for ``2..T`` (or ``1..T`` with the first entry ignored).
    """
    phi, p, lam = _occasion_vectors(phi, p, lam, T)
    return np.asarray(_chi_jit(phi, p, lam))


def cell_probs(phi, p, lam, T: int):
    """m-array and d-array cell probabilities for common rates.

    Returns ``(q_m, q_d)``; ``q_m[r-1, s-2]`` for ``s = 2..T+1`` (last column is
    ``chi_r``) and ``q_d[r-1, s-2]`` for ``s = 2..T``.
    """
    phi, p, lam = _occasion_vectors(phi, p, lam, T)
    rows = lambda v: np.broadcast_to(v, (T - 1, T))
    q_m, q_d = _cell_probs_jit(rows(phi), rows(p), rows(lam))
    return np.asarray(q_m), np.asarray(q_d)


def loglik_array(data: MDArrays, phi, p, lam) -> float:
    T = data.T
    phi, p, lam = _occasion_vectors(phi, p, lam, T)
    rows = lambda v: np.broadcast_to(v, (T - 1, T))
    ll = float(np.sum(_rows_jit(data.m_counts, data.d_counts, rows(phi), rows(p), rows(lam))))
    return ll if np.isfinite(ll) else NEG_INF


def history_covariates(hist: EncounterHistory) -> np.ndarray:
    """Covariate per occasion for time-constant / deterministic covariates.

    Missing entries take the most recent recorded value, and occasions before
    the first record take the first recorded value.
    """
    w = hist.covariates.copy()
    ok = np.isfinite(w)
    if not ok.any():
        return w
    idx = np.where(ok, np.arange(w.size), 0)
    np.maximum.accumulate(idx, out=idx)
    filled = w[idx]
    first = np.flatnonzero(ok)[0]
    filled[:first] = w[first]
    return filled


def history_rates(hist: EncounterHistory, spec: ModelSpec, packed):
    """Occasion-indexed ``(phi, p, lam)`` sequences for one individual."""
    T = spec.T
    w = history_covariates(hist)
    phi, p, lam = np.full(T, 0.5), np.full(T, 0.5), np.full(T, 0.5)
    for t in range(1, T + 1):
        age = max(int(hist.age(t)), 0)
        cls = spec.age_map.class_of(age)
        wt = w[t - 1] if np.isfinite(w[t - 1]) else None
        if spec.uses_covariate and wt is None:
            if t < hist.first_capture:
                continue
            raise ValueError(f"history {hist.id!r}: no covariate value available at occasion {t}")
        f, pp, ll = rates_at(spec, packed, t, cls, wt)
        if t < T:
            phi[t - 1] = f
        if t > 1:
            p[t - 1], lam[t - 1] = pp, ll
    return phi, p, lam


def loglik_history(hist: EncounterHistory, spec: ModelSpec, packed) -> float:
    if hist.T != spec.T:
        raise ValueError(f"history has {hist.T} occasions, model has {spec.T}")
    phi, p, lam = history_rates(hist, spec, packed)
    out = _history_jit(
        phi[None], p[None], lam[None],
        np.array([hist.first_capture]), np.array([hist.last_alive]),
        np.array([hist.recovered]), (hist.codes == 1)[None],
    )
    ll = float(out[0])
    return ll if np.isfinite(ll) else NEG_INF
