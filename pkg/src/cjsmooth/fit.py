"""
Maximum penalized likelihood fitting, effective degrees of freedom and AIC_p.

The optimizer is L-BFGS on the unconstrained parameter vector with exact
gradients from automatic differentiation, run in linearly transformed
coordinates so that very large smoothing parameters and strongly correlated
spline coefficients do not wreck the conditioning.  A short pilot run uses the
penalty-only transform (:func:`cjsmooth.basis.penalty_preconditioner`); the
final run whitens with the observed information plus the penalty.  The
objective itself is unchanged by either transform.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .basis import difference_matrix, penalty_preconditioner
from .model import SCHEMA_VERSION, ModelSpec, PackedParams, unpack
from .problem import Problem

log = logging.getLogger(__name__)

BAD_VALUE = 1e20


class FittingFailedError(RuntimeError):
    """The objective was not finite at any starting point."""


class SingularInformationError(np.linalg.LinAlgError):
    """Penalized information matrix is numerically singular."""


@dataclass
class FitOptions:
    restarts: int = 5
    tol: float = 1e-6
    max_iter: int = 2000
    seed: int = 0
    compute_edf: bool = True


@dataclass
class FitResult:
    spec: ModelSpec
    packed_hat: PackedParams
    h_vec: np.ndarray
    loglik_unpen: float
    loglik_pen: float
    edf: float | None
    aic_p: float | None
    converged: bool
    n_restarts_used: int
    gradient_norm: float
    edf_per_smooth: np.ndarray | None = None
    n_iter: int = 0
    trace: list = field(default_factory=list, repr=False)
    message: str = ""
    information: np.ndarray | None = field(default=None, repr=False)

    @property
    def theta(self) -> np.ndarray:
        return self.packed_hat.theta

    def natural(self) -> dict:
        return unpack(self.spec, self.packed_hat)

    def gamma(self, smooth_key: str) -> np.ndarray:
        return self.theta[self.spec.slice_of(smooth_key)]

    def to_dict(self) -> dict:
        nat = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.natural().items()}
        return {
            "schema_version": SCHEMA_VERSION,
            "spec": self.spec.to_dict(),
            "theta": self.theta.tolist(),
            "natural": nat,
            "h_vec": np.asarray(self.h_vec, float).tolist(),
            "smooths": list(self.spec.smooth_keys),
            "loglik_unpen": self.loglik_unpen,
            "loglik_pen": self.loglik_pen,
            "edf": self.edf,
            "edf_per_smooth": None if self.edf_per_smooth is None else list(map(float, self.edf_per_smooth)),
            "aic_p": self.aic_p,
            "convergence": {
                "converged": self.converged,
                "gradient_norm": self.gradient_norm,
                "n_restarts_used": self.n_restarts_used,
                "n_iter": self.n_iter,
                "message": self.message,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        spec = ModelSpec.from_dict(d["spec"])
        conv = d["convergence"]
        eps = d.get("edf_per_smooth")
        return cls(
            spec=spec,
            packed_hat=PackedParams(np.array(d["theta"], float), spec.layout),
            h_vec=np.array(d["h_vec"], float),
            loglik_unpen=d["loglik_unpen"],
            loglik_pen=d["loglik_pen"],
            edf=d["edf"],
            aic_p=d["aic_p"],
            converged=conv["converged"],
            n_restarts_used=conv["n_restarts_used"],
            gradient_norm=conv["gradient_norm"],
            edf_per_smooth=None if eps is None else np.array(eps),
            n_iter=conv.get("n_iter", 0),
            message=conv.get("message", ""),
        )


def _check_h(spec: ModelSpec, h_vec) -> np.ndarray:
    h = np.atleast_1d(np.asarray(h_vec, dtype=float)) if spec.n_smooths else np.zeros(0)
    if h.size != spec.n_smooths:
        raise ValueError(f"model has {spec.n_smooths} smooths, got {h.size} smoothing parameters")
    if np.any(h < 0) or not np.all(np.isfinite(h)):
        raise ValueError("smoothing parameters must be finite and nonnegative")
    return h


def penalized_loglik(spec: ModelSpec, packed, data, h_vec, weights=None) -> float:
    problem = data if isinstance(data, Problem) else Problem(spec, data)
    theta = packed.theta if isinstance(packed, PackedParams) else np.asarray(packed, float)
    return problem.penalized(theta, _check_h(problem.spec, h_vec), weights)


def penalty_matrix(spec: ModelSpec, h_vec) -> np.ndarray:
    """Full-size Hessian of the penalty (zeros outside spline blocks)."""
    n = spec.n_params
    S = np.zeros((n, n))
    for j, key in enumerate(spec.smooth_keys):
        b = spec.block(key)
        D = difference_matrix(b.K, b.diff_order)
        sl = spec.slice_of(key)
        S[sl, sl] = h_vec[j] * D.T @ D
    return S


def preconditioner(spec: ModelSpec, h_vec) -> np.ndarray:
    n = spec.n_params
    M = np.eye(n)
    for j, key in enumerate(spec.smooth_keys):
        b = spec.block(key)
        sl = spec.slice_of(key)
        M[sl, sl] = penalty_preconditioner(b.K, h_vec[j], b.diff_order)
    return M


def _free_indices(spec: ModelSpec, free) -> np.ndarray:
    if free is None:
        return np.arange(spec.n_params)
    idx = []
    for key in free:
        sl = spec.slice_of(key)
        idx.extend(range(sl.start, sl.stop))
    return np.array(sorted(idx), dtype=int)


def whitening(info, S) -> np.ndarray:
    """Map ``M`` with ``M^T (|info| + S) M = I``.

    ``info`` is an (approximate) unpenalized information matrix; negative or
    tiny eigenvalues are replaced by their magnitude, floored relative to the
    largest, so the result is always a valid change of coordinates.
    """
    ev, V = np.linalg.eigh(0.5 * (info + info.T))
    ev = np.abs(ev)
    ev = np.maximum(ev, max(ev.max(initial=0.0) * 1e-8, 1e-8))
    A = (V * ev) @ V.T + S
    ev, V = np.linalg.eigh(0.5 * (A + A.T))
    return V / np.sqrt(ev)


def _run_lbfgs(problem, h, weights, theta_start, free, M_ff, tol, max_iter, stop_early=False):
    """One L-BFGS run over the free coordinates.

    Returns ``(theta, f, gnorm, n_iter, trace, msg)`` or None when the
    objective is not finite at the start.  ``gnorm`` is the largest gradient
    component in optimizer coordinates.
    """
    base = theta_start.copy()
    cache = {}

    def to_theta(x):
        th = base.copy()
        th[free] = theta_start[free] + M_ff @ x
        return th

    def fun(x):
        v, g = problem.value_and_grad(to_theta(x), h, weights)
        if not np.isfinite(v) or not np.all(np.isfinite(g)):
            return BAD_VALUE, np.zeros_like(x)
        gx = M_ff.T @ g[free]
        cache[x.tobytes()] = (v, gx)
        return -v, -gx

    def lookup(x):
        if x.tobytes() not in cache:
            fun(x)
        return cache.get(x.tobytes(), (-BAD_VALUE, np.full_like(x, np.inf)))

    def done(v, gx):
        return (float(np.max(np.abs(gx))) if gx.size else 0.0) < tol * (1.0 + abs(v))

    trace = []

    def callback(intermediate_result):
        v, gx = lookup(np.asarray(intermediate_result.x))
        trace.append(v)
        if stop_early and done(v, gx):
            raise StopIteration

    x0 = np.zeros(free.size)
    f0, _ = fun(x0)
    if f0 >= BAD_VALUE:
        return None
    trace.append(-f0)
    x, n_iter, msg = x0, 0, ""
    for _ in range(4):
        res = minimize(
            fun, x, jac=True, method="L-BFGS-B", callback=callback,
            options={"maxiter": max_iter - n_iter, "maxcor": 20, "ftol": 1e-14, "gtol": 1e-12},
        )
        x, n_iter, msg = res.x, n_iter + res.nit, str(res.message)
        v, gx = lookup(x)
        if done(v, gx) or n_iter >= max_iter:
            break
    gnorm = float(np.max(np.abs(gx))) if gx.size else 0.0
    return to_theta(x), v, gnorm, n_iter, trace, msg


def maximize(problem: Problem, h_vec=(), options: FitOptions | None = None, *,
             theta0=None, weights=None, free=None, info=None) -> FitResult:
    """Maximize the penalized log-likelihood.

    ``theta0`` replaces the all-zero first start; further restarts add seeded
    uniform(-1, 1) jitter to it.  ``free`` optionally names the blocks to
    estimate; all others stay at their ``theta0`` values.  ``info`` is an
    approximate unpenalized information matrix (for instance from a fit to the
    full data) used to precondition the optimizer; without it a pilot run on
    the penalty-only preconditioner supplies one.
    """
    opts = options or FitOptions()
    if opts.restarts < 1:
        raise ValueError("restarts must be at least 1")
    spec = problem.spec
    h = _check_h(spec, h_vec)
    n = spec.n_params
    base = np.zeros(n) if theta0 is None else np.asarray(theta0, float).copy()
    if base.shape != (n,):
        raise ValueError(f"theta0 must have {n} entries")
    free_idx = _free_indices(spec, free)
    ix = np.ix_(free_idx, free_idx)
    S_ff = penalty_matrix(spec, h)[ix]
    rng = np.random.default_rng(opts.seed)

    best = None
    n_used = 0
    for k in range(opts.restarts):
        start = base.copy()
        if k > 0:
            start[free_idx] += rng.uniform(-1.0, 1.0, size=free_idx.size)
        n_used += 1
        n_pilot = 0
        info_k = None if info is None else np.asarray(info, float)
        if info_k is None:
            M0 = preconditioner(spec, h)[ix]
            pilot = _run_lbfgs(problem, h, weights, start, free_idx, M0, 1e-3, min(300, opts.max_iter),
                               stop_early=True)
            if pilot is None:
                log.debug("start %d: objective not finite", k)
                continue
            start, n_pilot = pilot[0], pilot[3]
            info_k = -problem.hessian(start, weights)
            if not np.all(np.isfinite(info_k)):
                info_k = np.zeros((n, n))
        M_ff = whitening(info_k[ix], S_ff)
        out = _run_lbfgs(problem, h, weights, start, free_idx, M_ff, opts.tol,
                         max(opts.max_iter - n_pilot, 1))
        if out is None:
            log.debug("start %d: objective not finite", k)
            continue
        out = out[:3] + (out[3] + n_pilot,) + out[4:]
        if best is None or out[1] > best[1]:
            best = out
    if best is None:
        raise FittingFailedError("penalized log-likelihood is not finite at any starting point")

    theta, fpen, gnorm, n_iter, trace, msg = best
    ll = problem.loglik(theta, weights)
    converged = bool(np.isfinite(fpen) and gnorm < opts.tol * (1.0 + abs(fpen)))
    fit = FitResult(
        spec=spec,
        packed_hat=PackedParams(theta, spec.layout),
        h_vec=h,
        loglik_unpen=ll,
        loglik_pen=fpen,
        edf=None,
        aic_p=None,
        converged=converged,
        n_restarts_used=n_used,
        gradient_norm=gnorm,
        n_iter=n_iter,
        trace=trace,
        message=msg,
    )
    if opts.compute_edf and free is None:
        try:
            nu, per, info_hat = _edf_parts(problem, theta, h, weights)
            fit.edf, fit.edf_per_smooth, fit.information = nu, per, info_hat
            fit.aic_p = aic_p(fit)
        except SingularInformationError as exc:
            log.info("effective df unavailable: %s", exc)
    return fit


def _edf_parts(problem: Problem, theta, h, weights=None, max_cond: float = 1e12):
    spec = problem.spec
    info = -problem.hessian(theta, weights)
    info = 0.5 * (info + info.T)
    A = info + penalty_matrix(spec, h)
    if not np.all(np.isfinite(A)):
        raise SingularInformationError("information matrix is not finite")
    d = np.sqrt(np.abs(np.diag(A)))
    if np.any(d == 0):
        raise SingularInformationError("information matrix has a zero diagonal entry")
    cond = np.linalg.cond(A / np.outer(d, d))
    if not np.isfinite(cond) or cond > max_cond:
        raise SingularInformationError(f"penalized information condition number {cond:.3g}")
    F = np.linalg.solve(A, info)
    per = np.array([np.trace(F[spec.slice_of(k), spec.slice_of(k)]) for k in spec.smooth_keys])
    return float(np.trace(F)), per, info


def effective_df(problem: Problem, theta, h_vec, *, weights=None, per_smooth=False,
                 max_cond: float = 1e12):
    """Trace of I_unpen (I_unpen + S)^{-1} with observed information at ``theta``.

    Raises :class:`SingularInformationError` when the (diagonally scaled)
    penalized information has condition number above ``max_cond``.
    """
    h = _check_h(problem.spec, h_vec)
    theta = theta.theta if isinstance(theta, PackedParams) else np.asarray(theta, float)
    nu, per, _ = _edf_parts(problem, theta, h, weights, max_cond)
    return (nu, per) if per_smooth else nu


def aic_p(fit: FitResult) -> float:
    if fit.edf is None:
        raise ValueError("effective degrees of freedom not available for this fit")
    return -2.0 * fit.loglik_unpen + 2.0 * fit.edf
