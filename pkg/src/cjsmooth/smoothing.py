"""
Smoothing-parameter selection: cross-validation over m-/d-array rows, k-fold
cross-validation over encounter histories, per-smooth staged
cross-validation, and grid search on AIC_p.

Every fold is a weighted fit on the full dataset (weight 0 for held-out
units), so all fits of one model share the compiled likelihood.  Full-data
fits along the grid are warm-started from the previous grid point and fold
fits from the full-data fit at the same ``h``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .basis import difference_matrix
from .fit import FitOptions, FitResult, FittingFailedError, maximize
from .model import ModelSpec
from .problem import Problem

log = logging.getLogger(__name__)

DEFAULT_GRID_1D = tuple(2.0 ** k for k in range(-2, 11, 2))
MAX_MISSING_FRACTION = 0.2


class AICUnavailableError(RuntimeError):
    """AIC_p could not be computed anywhere on the grid."""


class StagedCVUnavailableError(RuntimeError):
    """The fully parametric baseline needed for staged CV could not be fitted."""


class SelectionFailedError(RuntimeError):
    """Every candidate was disqualified."""


@dataclass
class CVOptions:
    fit: FitOptions = field(default_factory=FitOptions)
    fold_restarts: int = 1
    max_missing: float = MAX_MISSING_FRACTION


@dataclass
class SelectionResult:
    best_h: tuple
    table: list                      # rows: dict(h, fold, score, converged)
    scores: dict                     # h -> mean score (CV) or AIC_p; None if unavailable
    fits: dict = field(default_factory=dict, repr=False)   # h -> full-data FitResult
    method: str = ""

    @property
    def best_fit(self) -> FitResult | None:
        return self.fits.get(self.best_h)

    def write_csv(self, path) -> None:
        n_h = len(self.best_h)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            extra = [k for k in ("edf", "loglik") if any(k in r for r in self.table)]
            w.writerow([f"h_{j + 1}" for j in range(n_h)] + ["fold", "score", "converged"] + extra)
            for r in self.table:
                score = "NA" if r["score"] is None or not np.isfinite(r["score"]) else repr(r["score"])
                row = [repr(float(x)) for x in r["h"]] + [r["fold"], score, int(bool(r["converged"]))]
                row += ["NA" if r.get(k) is None else repr(float(r[k])) for k in extra]
                w.writerow(row)


def cartesian_grid(values_1d, n_smooths: int, allow_large: bool = False, fits_per_point: int = 11):
    """All h-vectors with components from ``values_1d``.

    Grids over three or more smooths are refused unless ``allow_large`` is
    set; the number of fits is logged first either way.
    """
    values = [float(v) for v in values_1d]
    n_points = len(values) ** n_smooths
    log.warning("grid of %d points, about %d fits", n_points, n_points * fits_per_point)
    if n_smooths >= 3 and not allow_large:
        raise ValueError(
            f"a full grid over {n_smooths} smooths needs about {n_points * fits_per_point} fits; "
            "use staged selection or pass allow_large=True"
        )
    mesh = np.meshgrid(*[values] * n_smooths, indexing="ij")
    return [tuple(float(x) for x in row) for row in np.stack([m.ravel() for m in mesh], axis=1)]


def _as_grid(h_grid, n_smooths: int) -> list:
    grid = []
    for h in h_grid:
        hv = tuple(float(x) for x in np.atleast_1d(h))
        if len(hv) != n_smooths:
            raise ValueError(f"h-vector {hv} has {len(hv)} entries, model has {n_smooths} smooths")
        if any(x < 0 or not np.isfinite(x) for x in hv):
            raise ValueError(f"invalid h-vector {hv}")
        grid.append(hv)
    if not grid:
        raise ValueError("empty smoothing-parameter grid")
    return list(dict.fromkeys(grid))


def _argbest(scores: dict, larger_is_better: bool = True):
    """Best candidate; near-ties go to the larger (smoother) h."""
    avail = {h: s for h, s in scores.items() if s is not None and np.isfinite(s)}
    if not avail:
        raise SelectionFailedError("no candidate smoothing parameter has a usable score")
    sign = 1.0 if larger_is_better else -1.0
    top = max(sign * s for s in avail.values())
    tol = 1e-10 * (1.0 + abs(top))
    tied = [h for h, s in avail.items() if sign * s >= top - tol]
    return max(tied, key=lambda h: (float(np.sum(np.log2(np.maximum(h, 1e-300)))), h))


def _nearest(done: dict, h):
    """Previously fitted grid point closest to ``h`` on the log2 scale."""
    if not done:
        return None
    lh = np.log2(np.maximum(h, 2.0 ** -60))
    return min(done, key=lambda g: float(np.sum((np.log2(np.maximum(g, 2.0 ** -60)) - lh) ** 2)))


def _fit_grid_point(problem, h, opts: FitOptions, done: dict, theta0=None, free=None, info=None):
    prev = _nearest(done, h)
    if prev is None:
        return maximize(problem, h, opts, theta0=theta0, free=free, info=info)
    warm = done[prev]
    return maximize(problem, h, replace(opts, restarts=1), theta0=warm.theta, free=free,
                    info=warm.information if info is None else info)


def _grid_cv(problem: Problem, grid, folds, opts: CVOptions, *, normalize: bool,
             theta0=None, free=None, info=None) -> SelectionResult:
    """Score every h in ``grid`` on ``folds`` = [(calibration weights, validation indices)]."""
    table, scores, fits = [], {}, {}
    fit_opts = replace(opts.fit, compute_edf=free is None)
    for h in grid:
        try:
            full = _fit_grid_point(problem, h, fit_opts, fits, theta0=theta0, free=free, info=info)
        except FittingFailedError as exc:
            log.warning("h=%s: full-data fit failed (%s)", h, exc)
            scores[h] = None
            continue
        if full.information is None:
            full.information = info if info is not None else -problem.hessian(full.theta)
        fits[h] = full
        fold_scores = []
        for k, (weights, val_idx) in enumerate(folds):
            fold_opts = replace(opts.fit, restarts=opts.fold_restarts, compute_edf=False)
            try:
                fit = maximize(problem, h, fold_opts, theta0=full.theta, weights=weights,
                               free=free, info=full.information)
                ok = fit.converged
            except FittingFailedError:
                fit, ok = None, False
            score = None
            if ok:
                units = problem.unit_loglik(fit.theta)[val_idx]
                score = float(np.sum(units) / (len(val_idx) if normalize else 1.0))
                if not np.isfinite(score):
                    score, ok = None, False
            table.append({"h": h, "fold": k + 1, "score": score, "converged": ok})
            fold_scores.append(score)
        missing = sum(s is None for s in fold_scores)
        if missing > opts.max_missing * len(folds):
            log.warning("h=%s disqualified: %d of %d folds missing", h, missing, len(folds))
            scores[h] = None
        else:
            scores[h] = float(np.mean([s for s in fold_scores if s is not None]))
    best = _argbest(scores)
    return SelectionResult(best, table, scores, fits)


# ---------------------------------------------------------------------------
# public selection routes


def loo_cv_array(data, spec: ModelSpec, h_grid, options: CVOptions | None = None) -> SelectionResult:
    """Leave-one-release-row-out cross-validation for m-/d-array data."""
    opts = options or CVOptions()
    problem = data if isinstance(data, Problem) else Problem(spec, data)
    if problem.spec.regime != "array_global":
        raise ValueError("row cross-validation needs the array regime")
    grid = _as_grid(h_grid, problem.spec.n_smooths)
    R = problem.n_units
    folds = []
    for r in range(R):
        w = np.ones(R)
        w[r] = 0.0
        folds.append((w, np.array([r])))
    res = _grid_cv(problem, grid, folds, opts, normalize=False)
    res.method = "loo-array"
    return res


def stratified_partitions(strata, k: int, calib_frac: float, seed: int) -> list:
    """``k`` random calibration/validation splits stratified by ``strata``.

    Each stratum of size ``n`` contributes ``round(calib_frac * n)`` units to
    the calibration sample.  Returns a list of ``(calibration, validation)``
    index arrays.
    """
    if k < 2:
        raise ValueError("need k >= 2 partitions")
    if not 0.0 < calib_frac < 1.0:
        raise ValueError("calib_frac must lie in (0, 1)")
    strata = np.asarray(strata)
    levels = np.unique(strata)
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(k)]
    out = []
    for rng in rngs:
        calib, val = [], []
        for lev in levels:
            idx = np.flatnonzero(strata == lev)
            perm = rng.permutation(idx)
            n_cal = int(round(calib_frac * idx.size))
            calib.append(perm[:n_cal])
            val.append(perm[n_cal:])
        c, v = np.sort(np.concatenate(calib)), np.sort(np.concatenate(val))
        assert np.intersect1d(c, v).size == 0, "calibration and validation samples overlap"
        assert c.size + v.size == strata.size
        out.append((c, v))
    return out


def _history_folds(problem: Problem, k, calib_frac, seed):
    folds = []
    for calib, val in stratified_partitions(problem.strata, k, calib_frac, seed):
        if val.size == 0:
            raise ValueError("calib_frac leaves an empty validation sample")
        w = np.zeros(problem.n_units)
        w[calib] = 1.0
        assert np.all(w[val] == 0.0)
        folds.append((w, val))
    return folds


def kfold_cv_histories(histories, spec: ModelSpec, h_grid, k: int = 10, calib_frac: float = 0.9,
                       seed: int = 0, options: CVOptions | None = None) -> SelectionResult:
    """k random stratified partitions; score = validation log-likelihood per history."""
    opts = options or CVOptions()
    problem = histories if isinstance(histories, Problem) else Problem(spec, histories)
    if problem.spec.regime == "array_global":
        raise ValueError("history cross-validation needs a history or hmm regime")
    grid = _as_grid(h_grid, problem.spec.n_smooths)
    folds = _history_folds(problem, k, calib_frac, seed)
    res = _grid_cv(problem, grid, folds, opts, normalize=True)
    res.method = "kfold"
    return res


def aic_select(fits: dict) -> SelectionResult:
    """AIC_p choice among already fitted grid points (``h -> FitResult``)."""
    table, scores = [], {}
    for h, fit in fits.items():
        ok = fit is not None and fit.converged and fit.aic_p is not None
        scores[h] = fit.aic_p if ok else None
        table.append({"h": h, "fold": 0, "score": None if fit is None else fit.aic_p,
                      "converged": bool(fit is not None and fit.converged),
                      "edf": None if fit is None else fit.edf,
                      "loglik": None if fit is None else fit.loglik_unpen})
    if all(s is None for s in scores.values()):
        raise AICUnavailableError(
            "penalized information is singular (or fits failed) at every grid point; "
            "select smoothing parameters by cross-validation instead"
        )
    best = _argbest(scores, larger_is_better=False)
    return SelectionResult(best, table, scores, {h: f for h, f in fits.items() if f is not None},
                           method="aic")


def aic_grid(spec: ModelSpec, data, h_grid, options: FitOptions | None = None) -> SelectionResult:
    """Minimize AIC_p over the grid; singular points are marked unavailable."""
    opts = replace(options or FitOptions(), compute_edf=True)
    problem = data if isinstance(data, Problem) else Problem(spec, data)
    grid = _as_grid(h_grid, problem.spec.n_smooths)
    fits = {}
    for h in grid:
        done = {g: f for g, f in fits.items() if f is not None}
        try:
            fit = _fit_grid_point(problem, h, opts, done)
        except FittingFailedError as exc:
            log.warning("h=%s: fit failed (%s)", h, exc)
            fits[h] = None
            continue
        if fit.information is None:
            fit.information = -problem.hessian(fit.theta)
        fits[h] = fit
    return aic_select(fits)


# ---------------------------------------------------------------------------
# staged selection


def parametric_baseline(spec: ModelSpec) -> ModelSpec:
    """Same model with every spline replaced by a logistic-linear predictor."""
    blocks = []
    for b in spec.blocks:
        if b.form == "spline_in_covariate":
            b = replace(b, form="logistic_linear_in_covariate", K=None)
        blocks.append(b)
    return replace(spec, blocks=tuple(blocks))


def spline_start_from_baseline(spec: ModelSpec, base_spec: ModelSpec, base_theta) -> np.ndarray:
    """Map a parametric fit onto the spline model.

    Shared blocks are copied; each spline takes the coefficients that
    reproduce the fitted linear predictor exactly (value at each knot
    Greville abscissa).
    """
    theta = np.zeros(spec.n_params)
    for key, start, stop in spec.layout:
        b = spec.block(key)
        src = np.asarray(base_theta)[base_spec.slice_of(key)]
        if b.form == "spline_in_covariate":
            theta[start:stop] = src[0] + src[1] * b.basis.greville()
        else:
            theta[start:stop] = src
    return theta


@dataclass
class StagedResult:
    best_h: tuple
    stage_h: list                    # selected vector after each pass
    results: list                    # per pass: list of per-smooth SelectionResult
    baseline: FitResult
    fit: FitResult | None = None     # semiparametric fit at best_h


def staged_cv(histories, spec: ModelSpec, h_grid_1d=DEFAULT_GRID_1D, stages: int = 2, seed: int = 0,
              k: int = 10, calib_frac: float = 0.9, options: CVOptions | None = None) -> StagedResult:
    """Select one smoothing parameter at a time with the other blocks held fixed.

    Pass 1 holds nuisance blocks at the fully parametric fit; later passes
    hold them at the semiparametric fit from the previous pass.
    """
    opts = options or CVOptions()
    if stages < 1:
        raise ValueError("stages must be >= 1")
    problem = histories if isinstance(histories, Problem) else Problem(spec, histories)
    spec = problem.spec
    if spec.n_smooths < 1:
        raise ValueError("staged selection needs at least one smooth")
    grid_1d = [float(x) for x in h_grid_1d]
    if spec.n_smooths == 1:
        res = kfold_cv_histories(problem, spec, [(v,) for v in grid_1d], k, calib_frac, seed, opts)
        return StagedResult(res.best_h, [res.best_h], [[res]], None, res.best_fit)

    base_spec = parametric_baseline(spec)
    try:
        base_problem = Problem(base_spec, problem.data)
        baseline = maximize(base_problem, (), replace(opts.fit, compute_edf=False))
    except (FittingFailedError, ValueError) as exc:
        raise StagedCVUnavailableError(f"parametric baseline fit failed: {exc}") from exc
    if not baseline.converged:
        raise StagedCVUnavailableError("parametric baseline fit did not converge")

    theta = spline_start_from_baseline(spec, base_spec, baseline.theta)
    h_vec = [max(grid_1d)] * spec.n_smooths
    folds = _history_folds(problem, k, calib_frac, seed)
    stage_h, results, fit = [], [], None
    for stage in range(stages):
        info = -problem.hessian(theta)
        pass_results = []
        for j, key in enumerate(spec.smooth_keys):
            grid = []
            for v in grid_1d:
                hv = list(h_vec)
                hv[j] = v
                grid.append(tuple(hv))
            res = _grid_cv(problem, grid, folds, opts, normalize=True, theta0=theta,
                           free=[key], info=info)
            res.method = f"staged[{stage + 1}]:{key}"
            pass_results.append(res)
        # nuisance blocks stay at the pass-start estimates for every smooth in the pass
        h_vec = [res.best_h[j] for j, res in enumerate(pass_results)]
        stage_h.append(tuple(h_vec))
        results.append(pass_results)
        fit = maximize(problem, h_vec, replace(opts.fit, restarts=1), theta0=theta, info=info)
        theta = fit.theta
        log.info("stage %d: h = %s", stage + 1, h_vec)
    return StagedResult(tuple(h_vec), stage_h, results, baseline, fit)


def max_second_difference(gamma) -> float:
    """Largest absolute second difference of spline coefficients."""
    g = np.asarray(gamma, float)
    return float(np.max(np.abs(difference_matrix(g.size, 2) @ g)))
