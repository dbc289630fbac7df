"""
Cubic B-spline bases with equidistant knots and difference penalties.

The basis evaluation uses the closed-form uniform cubic B-spline
polynomials, so a design matrix is a cheap gather of four weights per
point.  Coefficients multiply the basis directly on the link scale; there
is no separate intercept column because the basis already spans constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import block_diag

DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """Cubic B-spline basis of ``K`` functions covering ``[domain_lo, domain_hi]``."""

    K: int
    domain_lo: float
    domain_hi: float
    degree: int = DEGREE

    def __post_init__(self):
        if self.degree != DEGREE:
            raise ValueError("only cubic bases are supported")
        if self.K < DEGREE + 1:
            raise ValueError(f"K must be at least {DEGREE + 1}, got {self.K}")
        if not (np.isfinite(self.domain_lo) and np.isfinite(self.domain_hi)):
            raise ValueError("basis domain must be finite")
        if not self.domain_lo < self.domain_hi:
            raise ValueError(
                f"degenerate basis domain [{self.domain_lo}, {self.domain_hi}]"
            )

    @property
    def spacing(self) -> float:
        return (self.domain_hi - self.domain_lo) / (self.K - DEGREE)

    @property
    def knots(self) -> np.ndarray:
        # K + 4 knots; knots[3] = domain_lo and knots[K] = domain_hi
        offsets = np.arange(self.K + DEGREE + 1) - DEGREE
        return self.domain_lo + self.spacing * offsets

    def greville(self) -> np.ndarray:
        """Greville abscissae; coefficients equal to an affine function
        evaluated here reproduce that affine function exactly."""
        t = self.knots
        return np.array([t[k + 1:k + DEGREE + 1].mean() for k in range(self.K)])


@dataclass(frozen=True)
class SplineSmooth:
    basis: SplineBasis
    gamma: np.ndarray
    h: float = 0.0
    diff_order: int = 2

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        object.__setattr__(self, "gamma", gamma)
        if gamma.shape != (self.basis.K,):
            raise ValueError(
                f"gamma has length {gamma.size}, basis has K={self.basis.K}"
            )
        if self.h < 0:
            raise ValueError("smoothing parameter must be nonnegative")
        if self.diff_order not in (1, 2, 3) or self.diff_order >= self.basis.K:
            raise ValueError(f"invalid difference order {self.diff_order}")


@dataclass(frozen=True)
class PenaltyVector:
    smooths: tuple
    h_vec: np.ndarray = field(default=None)

    def __post_init__(self):
        smooths = tuple(self.smooths)
        object.__setattr__(self, "smooths", smooths)
        h = self.h_vec
        if h is None:
            h = [s.h for s in smooths]
        h = np.atleast_1d(np.asarray(h, dtype=float))
        object.__setattr__(self, "h_vec", h)
        if h.size != len(smooths):
            raise ValueError(
                f"h_vec has {h.size} entries for {len(smooths)} smooths"
            )
        if np.any(h < 0) or not np.all(np.isfinite(h)):
            raise ValueError("smoothing parameters must be finite and nonnegative")


def build_basis(K: int, domain_lo: float, domain_hi: float) -> SplineBasis:
    return SplineBasis(int(K), float(domain_lo), float(domain_hi))


def _cubic_weights(u):
    """Values of the four uniform cubic B-spline pieces at local offset u."""
    u2 = u * u
    u3 = u2 * u
    return (
        (1.0 - u) ** 3 / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    )


def design_matrix(basis: SplineBasis, w) -> np.ndarray:
    """Basis values at every entry of ``w``; shape ``w.shape + (K,)``.

    Values outside the basis domain are clamped to the nearest boundary.
    """
    w = np.asarray(w, dtype=float)
    if not np.all(np.isfinite(w)):
        raise ValueError("covariate values must be finite")
    flat = np.clip(w.ravel(), basis.domain_lo, basis.domain_hi)
    x = (flat - basis.domain_lo) / basis.spacing
    j = np.clip(np.floor(x).astype(int), 0, basis.K - DEGREE - 1)
    u = x - j
    out = np.zeros((flat.size, basis.K))
    rows = np.arange(flat.size)
    for offset, weight in enumerate(_cubic_weights(u)):
        out[rows, j + offset] = weight
    return out.reshape(w.shape + (basis.K,))


def eval_basis(basis: SplineBasis, w: float) -> np.ndarray:
    w = float(w)
    if not np.isfinite(w):
        raise ValueError(f"cannot evaluate basis at non-finite value {w}")
    return design_matrix(basis, np.array([w]))[0]


def predictor(smooth: SplineSmooth, w) -> float | np.ndarray:
    """Linear predictor (link scale) of a smooth at ``w``."""
    vals = design_matrix(smooth.basis, w) @ smooth.gamma
    return float(vals) if np.ndim(vals) == 0 else vals


def difference_matrix(K: int, order: int = 2) -> np.ndarray:
    return np.diff(np.eye(K), n=order, axis=0)


def penalty(pv: PenaltyVector) -> float:
    total = 0.0
    for s, h in zip(pv.smooths, pv.h_vec):
        d = np.diff(s.gamma, n=s.diff_order)
        total += 0.5 * h * float(d @ d)
    return total


def penalty_hessian(pv: PenaltyVector) -> np.ndarray:
    blocks = []
    for s, h in zip(pv.smooths, pv.h_vec):
        D = difference_matrix(s.basis.K, s.diff_order)
        blocks.append(h * D.T @ D)
    return block_diag(*blocks) if blocks else np.zeros((0, 0))


def penalty_preconditioner(K: int, h: float, order: int = 2) -> np.ndarray:
    """Linear map ``gamma = M @ x`` that equilibrates a heavily penalized block.

    ``M = U diag(1 / sqrt(1 + h * ev))`` where ``D'D = U diag(ev) U'``, so the
    penalty restricted to ``x`` has curvature below one in every direction.
    """
    D = difference_matrix(K, order)
    ev, U = np.linalg.eigh(D.T @ D)
    ev = np.clip(ev, 0.0, None)
    return U * (1.0 / np.sqrt(1.0 + h * ev))[None, :]


def default_domain(values: Sequence[float], extend: float = 0.05) -> tuple[float, float]:
    """Observed range widened by ``extend`` of its length on each side."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("no finite covariate values to derive a basis domain")
    lo, hi = float(v.min()), float(v.max())
    span = hi - lo
    if span <= 0:
        span = max(abs(lo), 1.0)
    return lo - extend * span, hi + extend * span
