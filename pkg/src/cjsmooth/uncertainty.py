"""
Bootstrap uncertainty for fitted curves: nonparametric resampling of
histories stratified by first capture, parametric resampling of m-/d-arrays,
pointwise quantile bands and simultaneous bands obtained by inflating the
pointwise band until enough whole replicate curves fit inside.

Replicates are refitted at fixed smoothing parameters, warm-started from the
original fit.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, logit

from .basis import design_matrix
from .data import MDArrays
from .fit import FitOptions, FitResult, FittingFailedError, maximize
from .problem import Problem

log = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.1
MIN_REPLICATES = 20
_P_CLIP = 1e-12


class BootstrapFailedError(RuntimeError):
    """Too many replicate fits failed."""


@dataclass
class BootstrapResult:
    fits: list
    failed: list = field(default_factory=list)        # replicate indices
    replicates: list = field(default_factory=list, repr=False)  # count weights or MDArrays

    def __len__(self) -> int:
        return len(self.fits)


def _replicate_rngs(seed: int, B: int):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(B)]


def stratified_counts(strata, rng) -> np.ndarray:
    """Resampling counts: each stratum redrawn with replacement at its own size."""
    strata = np.asarray(strata)
    counts = np.zeros(strata.size)
    for lev in np.unique(strata):
        idx = np.flatnonzero(strata == lev)
        counts += np.bincount(rng.choice(idx, size=idx.size, replace=True), minlength=strata.size)
    return counts


def refit(problem: Problem, fit: FitResult, weights=None, options: FitOptions | None = None):
    """Refit at ``fit.h_vec`` from ``fit``; one cold start if the warm start fails."""
    opts = replace(options or FitOptions(), restarts=1, compute_edf=False)
    try:
        out = maximize(problem, fit.h_vec, opts, theta0=fit.theta, weights=weights, info=fit.information)
        if out.converged:
            return out
    except FittingFailedError:
        pass
    try:
        out = maximize(problem, fit.h_vec, opts, weights=weights)
    except FittingFailedError:
        return None
    return out if out.converged else None


def _check_failures(failed, B):
    if len(failed) > MAX_FAILED_FRACTION * B:
        raise BootstrapFailedError(f"{len(failed)} of {B} bootstrap replicates failed")


def nonparam_bootstrap(histories, spec, h_vec, B: int, seed: int = 0, fit: FitResult | None = None,
                       options: FitOptions | None = None) -> BootstrapResult:
    """Resample histories within first-capture strata and refit at fixed ``h_vec``."""
    if B < 1:
        raise ValueError("B must be >= 1")
    problem = histories if isinstance(histories, Problem) else Problem(spec, histories)
    if problem.strata is None:
        raise ValueError("nonparametric bootstrap needs encounter histories")
    if fit is None:
        fit = maximize(problem, h_vec, replace(options or FitOptions(), compute_edf=False))
    if fit.information is None:
        fit.information = -problem.hessian(fit.theta)
    out = BootstrapResult([])
    for b, rng in enumerate(_replicate_rngs(seed, B)):
        counts = stratified_counts(problem.strata, rng)
        out.replicates.append(counts)
        res = refit(problem, fit, counts, options)
        if res is None:
            out.failed.append(b)
            log.warning("bootstrap replicate %d failed", b)
        else:
            out.fits.append(res)
    _check_failures(out.failed, B)
    return out


def draw_arrays(q_m, q_d, releases, rng, covariate=None) -> MDArrays:
    """Multinomial m-/d-array rows given cell probabilities and release counts."""
    T = q_m.shape[1]
    m = np.zeros((T - 1, T))
    d = np.zeros((T - 1, T - 1))
    for r in range(T - 1):
        probs = np.clip(np.concatenate([q_m[r], q_d[r]]), 0.0, None)
        probs = probs / probs.sum()
        draw = rng.multinomial(int(releases[r]), probs)
        m[r], d[r] = draw[:T], draw[T:]
    return MDArrays(m, d, covariate=covariate)


def param_bootstrap(data: MDArrays, fit: FitResult, B: int, seed: int = 0,
                    options: FitOptions | None = None) -> BootstrapResult:
    """Redraw every release cohort from the fitted cell probabilities and refit."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if fit.spec.regime != "array_global" or not isinstance(data, MDArrays):
        raise ValueError("parametric bootstrap needs m-/d-array data and an array-regime fit")
    problem = Problem(fit.spec, data)
    if fit.information is None:
        fit.information = -problem.hessian(fit.theta)
    q_m, q_d = problem.cell_probs(fit.theta)
    out = BootstrapResult([])
    for b, rng in enumerate(_replicate_rngs(seed, B)):
        rep = draw_arrays(q_m, q_d, data.releases, rng, data.covariate)
        out.replicates.append(rep)
        res = refit(Problem(fit.spec, rep), fit, None, options)
        if res is None:
            out.failed.append(b)
            log.warning("bootstrap replicate %d failed", b)
        else:
            out.fits.append(res)
    _check_failures(out.failed, B)
    return out


# ---------------------------------------------------------------------------
# curves and bands


def _smooth_key(spec, smooth) -> str:
    return spec.smooth_keys[smooth] if isinstance(smooth, (int, np.integer)) else smooth


def curve_link(fit: FitResult, smooth, w) -> np.ndarray:
    """Fitted spline predictor (logit scale) at covariate values ``w``."""
    key = _smooth_key(fit.spec, smooth)
    block = fit.spec.block(key)
    return design_matrix(block.basis, np.asarray(w, float)) @ fit.gamma(key)


def curve(fit: FitResult, smooth, w) -> np.ndarray:
    """Fitted survival probability at covariate values ``w``."""
    return expit(curve_link(fit, smooth, w))


@dataclass
class Band:
    w: np.ndarray
    estimate: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    factor: float = 1.0


def _replicate_curves(boot_fits, smooth, w_grid) -> np.ndarray:
    fits = boot_fits.fits if isinstance(boot_fits, BootstrapResult) else list(boot_fits)
    if len(fits) < MIN_REPLICATES:
        raise ValueError(f"need at least {MIN_REPLICATES} successful replicates, got {len(fits)}")
    return np.stack([curve(f, smooth, w_grid) for f in fits])


def pointwise_band(boot_fits, smooth, w_grid, level: float = 0.95, estimate=None) -> Band:
    """Empirical (a/2, 1-a/2) quantiles of replicate curves on the probability scale.

    ``estimate`` is the original fit (or its curve values); without it the
    replicate median stands in.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    w_grid = np.asarray(w_grid, float)
    curves = _replicate_curves(boot_fits, smooth, w_grid)
    alpha = 1.0 - level
    lo, hi = np.quantile(curves, [alpha / 2, 1 - alpha / 2], axis=0)
    if estimate is None:
        est = np.median(curves, axis=0)
    elif isinstance(estimate, FitResult):
        est = curve(estimate, smooth, w_grid)
    else:
        est = np.asarray(estimate, float)
    return Band(w_grid, est, lo, hi, level)


def _to_link(p):
    return logit(np.clip(p, _P_CLIP, 1 - _P_CLIP))


def _widened(pointwise: Band, c: float):
    est = _to_link(pointwise.estimate)
    lo, hi = _to_link(pointwise.lower), _to_link(pointwise.upper)
    return lo - (c - 1.0) * np.abs(est - lo), hi + (c - 1.0) * np.abs(hi - est)


def band_coverage(curves_link, lo, hi) -> float:
    """Fraction of whole curves inside ``[lo, hi]`` everywhere."""
    inside = np.all((curves_link >= lo - 1e-12) & (curves_link <= hi + 1e-12), axis=1)
    return float(inside.mean())


def simultaneous_band(boot_fits, pointwise: Band, smooth=0, level: float | None = None,
                      c_max: float = 20.0, tol: float = 1e-3) -> Band:
    """Smallest inflation ``c`` in [1, c_max] of the pointwise band (logit
    scale, about the estimate) containing a ``level`` fraction of whole
    replicate curves."""
    level = pointwise.level if level is None else level
    curves = _to_link(_replicate_curves(boot_fits, smooth, pointwise.w))
    evaluated = []

    def cover(c):
        v = band_coverage(curves, *_widened(pointwise, c))
        evaluated.append((c, v))
        return v

    if cover(1.0) >= level:
        c = 1.0
    else:
        top = cover(c_max)
        if top < level:
            raise ValueError(f"inflating the band by {c_max} covers only {top:.3f} of replicate curves")
        a, b = 1.0, c_max
        while b - a > tol:
            mid = 0.5 * (a + b)
            if cover(mid) >= level:
                b = mid
            else:
                a = mid
        c = b
    evaluated.sort()
    covs = [v for _, v in evaluated]
    assert all(x <= y for x, y in zip(covs, covs[1:])), "coverage not monotone in the inflation factor"
    lo, hi = _widened(pointwise, c)
    return Band(pointwise.w, pointwise.estimate, expit(lo), expit(hi), level, c)


def write_band_csv(path, bands: dict) -> None:
    """``bands`` maps smooth key -> (pointwise Band, simultaneous Band or None)."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["smooth", "w", "estimate", "lo_pointwise", "hi_pointwise",
                     "lo_simultaneous", "hi_simultaneous"])
        for key, (pw, sim) in bands.items():
            for i, w in enumerate(pw.w):
                sl = ["NA", "NA"] if sim is None else [repr(float(sim.lower[i])), repr(float(sim.upper[i]))]
                wr.writerow([key, repr(float(w)), repr(float(pw.estimate[i])),
                             repr(float(pw.lower[i])), repr(float(pw.upper[i]))] + sl)


def write_replicate_summary(path, boot: BootstrapResult) -> None:
    rows = []
    for f in boot.fits:
        nat = {k: v for k, v in f.natural().items() if np.ndim(v) == 0}
        rows.append({"loglik_pen": f.loglik_pen, "converged": int(f.converged), **nat})
    keys = list(rows[0]) if rows else ["loglik_pen", "converged"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["replicate"] + keys)
        for i, r in enumerate(rows):
            wr.writerow([i + 1] + [repr(float(r[k])) for k in keys])
