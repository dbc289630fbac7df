"""
Declarative model specification and the map between the optimizer's
unconstrained vector ``theta`` and natural-scale parameters.

A model is an ordered tuple of :class:`ParamBlock` objects.  Each block owns a
contiguous slice of ``theta``.  Transforms:

* probabilities given directly (``constant``/``per_occasion`` forms): logit
* regression coefficients (logistic-linear and spline forms): identity
* covariate-process means: identity
* covariate-process standard deviations: log
* mean-reversion rates ``eta``: logit of ``eta / 2`` so that ``0 < eta < 2``
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Mapping

import jax
import jax.numpy as jnp
import numpy as np
from scipy.special import expit, logit

from .basis import SplineBasis, difference_matrix, eval_basis

REGIMES = ("array_global", "history_constant", "hmm_timevarying")

RATE_ROLES = ("survival", "recapture", "recovery")
COVPROC_ROLES = (
    "covproc_mu0", "covproc_sigma0", "covproc_mu", "covproc_sigma", "covproc_eta",
)
ROLES = RATE_ROLES + COVPROC_ROLES

FORMS = (
    "constant",
    "per_occasion",
    "logistic_linear_in_covariate",
    "logistic_linear_in_time",
    "spline_in_covariate",
    "fixed",
)
COVARIATE_FORMS = ("logistic_linear_in_covariate", "spline_in_covariate")

SCHEMA_VERSION = 1


def link_inv(x):
    """Inverse logit, overflow-safe."""
    return expit(x)


# ---------------------------------------------------------------------------
# specification types


@dataclass(frozen=True)
class AgeClassMap:
    """Age classes from ascending cutpoints: class 1 is ``age < boundaries[0]``."""

    boundaries: tuple = ()

    def __post_init__(self):
        b = tuple(int(x) for x in self.boundaries)
        object.__setattr__(self, "boundaries", b)
        if any(x < 1 for x in b) or any(b1 >= b2 for b1, b2 in zip(b, b[1:])):
            raise ValueError(f"age boundaries must be increasing and >= 1: {b}")

    @property
    def n_classes(self) -> int:
        return len(self.boundaries) + 1

    def class_of(self, age):
        """1-based class index for integer age(s)."""
        cls = np.searchsorted(np.asarray(self.boundaries), np.asarray(age), side="right") + 1
        return int(cls) if np.ndim(cls) == 0 else cls


@dataclass(frozen=True)
class ParamBlock:
    role: str
    form: str = "constant"
    age_class: int | None = None
    K: int | None = None
    domain: tuple | None = None
    diff_order: int = 2
    value: float | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.form not in FORMS:
            raise ValueError(f"unknown form {self.form!r}")
        if self.domain is not None:
            object.__setattr__(self, "domain", tuple(float(x) for x in self.domain))
        if self.form == "spline_in_covariate":
            if self.K is None or self.K < 4:
                raise ValueError(f"spline block {self.key} needs K >= 4")
            if self.diff_order not in (1, 2, 3) or self.diff_order >= self.K:
                raise ValueError(f"invalid diff_order for {self.key}")
        if self.form == "fixed":
            if self.value is None or not 0.0 <= self.value <= 1.0:
                raise ValueError(f"fixed block {self.key} needs a value in [0, 1]")
        if self.role in COVPROC_ROLES and self.form != "constant":
            raise ValueError(f"covariate-process block {self.key} must be constant")

    @property
    def key(self) -> str:
        return self.role if self.age_class is None else f"{self.role}[{self.age_class}]"

    def dimension(self, T: int) -> int:
        return {
            "constant": 1,
            "per_occasion": T - 1,
            "logistic_linear_in_covariate": 2,
            "logistic_linear_in_time": 2,
            "spline_in_covariate": self.K,
            "fixed": 0,
        }[self.form]

    @property
    def basis(self) -> SplineBasis:
        if self.form != "spline_in_covariate":
            raise ValueError(f"block {self.key} is not a spline")
        if self.domain is None:
            raise ValueError(f"spline block {self.key} has no domain; resolve the spec first")
        return SplineBasis(self.K, *self.domain)

    @property
    def transform(self) -> str:
        if self.form == "fixed":
            return "none"
        if self.role in RATE_ROLES:
            return "logit" if self.form in ("constant", "per_occasion") else "identity"
        if self.role in ("covproc_sigma0", "covproc_sigma"):
            return "log"
        if self.role == "covproc_eta":
            return "half_logit"
        return "identity"


@dataclass(frozen=True)
class ModelSpec:
    T: int
    regime: str
    age_map: AgeClassMap = field(default_factory=AgeClassMap)
    blocks: tuple = ()
    hmm_bins: int | None = None
    hmm_grid: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.hmm_grid is not None:
            object.__setattr__(self, "hmm_grid", tuple(float(x) for x in self.hmm_grid))
        self._validate()

    def _validate(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.T < 2:
            raise ValueError("need at least two occasions")
        nc = self.age_map.n_classes
        keys = [b.key for b in self.blocks]
        dup = {k for k in keys if keys.count(k) > 1}
        if dup:
            raise ValueError(f"duplicate blocks: {sorted(dup)}")
        for b in self.blocks:
            per_class = b.role in ("survival", "covproc_mu", "covproc_sigma", "covproc_eta")
            if per_class and b.age_class not in range(1, nc + 1):
                raise ValueError(f"block {b.key} needs age_class in 1..{nc}")
            if not per_class and b.age_class is not None:
                raise ValueError(f"block {b.role} is not age-specific")
            if b.role != "survival" and b.form in COVARIATE_FORMS:
                raise ValueError(f"covariate forms are supported for survival only ({b.key})")
        required = [f"survival[{a}]" for a in range(1, nc + 1)] + ["recapture", "recovery"]
        if self.regime == "hmm_timevarying":
            required += ["covproc_mu0", "covproc_sigma0"]
            for role in ("covproc_mu", "covproc_sigma", "covproc_eta"):
                required += [f"{role}[{a}]" for a in range(1, nc + 1)]
            if self.hmm_bins is None or self.hmm_bins < 2:
                raise ValueError("hmm regime needs hmm_bins >= 2")
            for b in self.blocks:
                if b.role == "survival" and b.form in ("per_occasion", "logistic_linear_in_time"):
                    raise ValueError("time-indexed survival is not supported in the hmm regime")
        else:
            extra = [b.key for b in self.blocks if b.role in COVPROC_ROLES]
            if extra:
                raise ValueError(f"covariate-process blocks need the hmm regime: {extra}")
        missing = [k for k in required if k not in keys]
        if missing:
            raise ValueError(f"missing blocks: {missing}")
        if self.regime == "array_global" and nc > 1:
            rec = self.block("recapture")
            if not (rec.form == "fixed" and rec.value == 0.0):
                raise ValueError(
                    "age classes with array data need recapture fixed at 0 (recovery-only data)"
                )

    # -- lookup helpers
    def block(self, key: str) -> ParamBlock:
        for b in self.blocks:
            if b.key == key:
                return b
        raise KeyError(key)

    @property
    def layout(self) -> tuple:
        out, start = [], 0
        for b in self.blocks:
            d = b.dimension(self.T)
            out.append((b.key, start, start + d))
            start += d
        return tuple(out)

    @property
    def n_params(self) -> int:
        return sum(b.dimension(self.T) for b in self.blocks)

    def slice_of(self, key: str) -> slice:
        for k, a, b in self.layout:
            if k == key:
                return slice(a, b)
        raise KeyError(key)

    @property
    def smooth_keys(self) -> tuple:
        return tuple(b.key for b in self.blocks if b.form == "spline_in_covariate")

    @property
    def n_smooths(self) -> int:
        return len(self.smooth_keys)

    @property
    def uses_covariate(self) -> bool:
        return any(b.form in COVARIATE_FORMS for b in self.blocks)

    def with_blocks(self, blocks) -> "ModelSpec":
        return replace(self, blocks=tuple(blocks))

    # -- serialization
    def to_dict(self) -> dict:
        blocks = []
        for b in self.blocks:
            d = {"role": b.role, "form": b.form}
            if b.age_class is not None:
                d["age_class"] = b.age_class
            if b.form == "spline_in_covariate":
                d["K"] = b.K
                d["diff_order"] = b.diff_order
                if b.domain is not None:
                    d["domain"] = list(b.domain)
            if b.form == "fixed":
                d["value"] = b.value
            blocks.append(d)
        out = {
            "schema_version": SCHEMA_VERSION,
            "T": self.T,
            "regime": self.regime,
            "age_boundaries": list(self.age_map.boundaries),
            "blocks": blocks,
        }
        if self.hmm_bins is not None:
            out["hmm_bins"] = self.hmm_bins
        if self.hmm_grid is not None:
            out["hmm_grid"] = list(self.hmm_grid)
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}")
        blocks = [
            ParamBlock(
                role=b["role"],
                form=b.get("form", "constant"),
                age_class=b.get("age_class"),
                K=b.get("K"),
                domain=tuple(b["domain"]) if b.get("domain") is not None else None,
                diff_order=b.get("diff_order", 2),
                value=b.get("value"),
            )
            for b in d["blocks"]
        ]
        grid = d.get("hmm_grid")
        return cls(
            T=int(d["T"]),
            regime=d["regime"],
            age_map=AgeClassMap(tuple(d.get("age_boundaries", ()))),
            blocks=tuple(blocks),
            hmm_bins=d.get("hmm_bins"),
            hmm_grid=tuple(grid) if grid is not None else None,
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class PackedParams:
    theta: np.ndarray
    layout: tuple

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "theta", theta)
        stop = 0
        for _, a, b in self.layout:
            if a != stop:
                raise ValueError("layout slices must be contiguous")
            stop = b
        if stop != theta.size:
            raise ValueError(f"layout covers {stop} entries, theta has {theta.size}")


# ---------------------------------------------------------------------------
# transforms


def _forward(transform: str, value: np.ndarray, key: str) -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite natural value for block {key}")
    if transform == "logit":
        if np.any((v <= 0) | (v >= 1)):
            raise ValueError(f"block {key}: probabilities must lie in (0, 1)")
        return logit(v)
    if transform == "log":
        if np.any(v <= 0):
            raise ValueError(f"block {key}: standard deviations must be positive")
        return np.log(v)
    if transform == "half_logit":
        if np.any((v <= 0) | (v >= 2)):
            raise ValueError(f"block {key}: eta must lie in (0, 2)")
        return logit(v / 2.0)
    return v


def _inverse(transform: str, x):
    if transform == "logit":
        return expit(x)
    if transform == "log":
        return np.exp(x)
    if transform == "half_logit":
        return 2.0 * expit(x)
    return np.asarray(x, dtype=float)


def pack(spec: ModelSpec, natural: Mapping) -> PackedParams:
    parts = []
    for b in spec.blocks:
        d = b.dimension(spec.T)
        if d == 0:
            continue
        if b.key not in natural:
            raise ValueError(f"no natural value given for block {b.key}")
        v = np.atleast_1d(np.asarray(natural[b.key], dtype=float))
        if v.size != d:
            raise ValueError(f"block {b.key} expects {d} values, got {v.size}")
        parts.append(_forward(b.transform, v, b.key))
    theta = np.concatenate(parts) if parts else np.zeros(0)
    return PackedParams(theta, spec.layout)


def unpack(spec: ModelSpec, packed: PackedParams | np.ndarray) -> dict:
    if isinstance(packed, PackedParams):
        if tuple(packed.layout) != spec.layout:
            raise ValueError("packed layout does not match the model spec")
        theta = packed.theta
    else:
        theta = np.asarray(packed, dtype=float)
        if theta.size != spec.n_params:
            raise ValueError(f"theta has {theta.size} entries, spec needs {spec.n_params}")
    out = {}
    for b, (_, a, z) in zip(spec.blocks, spec.layout):
        if b.form == "fixed":
            out[b.key] = float(b.value)
            continue
        v = _inverse(b.transform, theta[a:z])
        out[b.key] = float(v[0]) if b.form == "constant" else np.asarray(v)
    return out


def zero_natural(spec: ModelSpec) -> dict:
    return unpack(spec, np.zeros(spec.n_params))


# ---------------------------------------------------------------------------
# evaluation of rate blocks (works on numpy and jax arrays)


def time_z(T: int, t):
    """Occasion index standardized over 1..T to mean 0 and variance 1."""
    occ = np.arange(1, T + 1)
    return (t - occ.mean()) / occ.std()


def block_prob(block: ParamBlock, theta_b, T: int, *, t=None, w=None, B=None, shape=()):
    """Probability from one rate block at occasion(s) ``t`` / covariate ``w``.

    ``B`` holds precomputed basis rows for spline blocks (``(..., K)``).
    Per-occasion survival is indexed from occasion 1, recapture and recovery
    from occasion 2.
    """
    f = block.form
    if f == "fixed":
        return jnp.full(shape, block.value)
    if f == "constant":
        return jnp.full(shape, jax.nn.sigmoid(theta_b[0]))
    if f == "per_occasion":
        offset = 1 if block.role == "survival" else 2
        idx = jnp.clip(jnp.asarray(t) - offset, 0, T - 2)
        return jax.nn.sigmoid(theta_b[idx])
    if f == "logistic_linear_in_time":
        return jax.nn.sigmoid(theta_b[0] + theta_b[1] * time_z(T, jnp.asarray(t)))
    if f == "logistic_linear_in_covariate":
        return jax.nn.sigmoid(theta_b[0] + theta_b[1] * w)
    if f == "spline_in_covariate":
        return jax.nn.sigmoid(B @ theta_b)
    raise ValueError(f)


def covproc_params(spec: ModelSpec, theta) -> dict:
    """Natural covariate-process parameters from theta (jax-traceable).

    Per-class arrays are ordered by age class.
    """
    nc = spec.age_map.n_classes

    def get(key):
        return theta[spec.slice_of(key)][0]

    return {
        "mu0": get("covproc_mu0"),
        "sigma0": jnp.exp(get("covproc_sigma0")),
        "mu": jnp.stack([get(f"covproc_mu[{a}]") for a in range(1, nc + 1)]),
        "sigma": jnp.exp(jnp.stack([get(f"covproc_sigma[{a}]") for a in range(1, nc + 1)])),
        "eta": 2.0 * jax.nn.sigmoid(jnp.stack([get(f"covproc_eta[{a}]") for a in range(1, nc + 1)])),
    }


def penalty_value(spec: ModelSpec, theta, h_vec):
    """Difference penalty of all spline blocks (jax-traceable)."""
    total = 0.0
    for j, key in enumerate(spec.smooth_keys):
        b = spec.block(key)
        D = difference_matrix(b.K, b.diff_order)
        d = D @ theta[spec.slice_of(key)]
        total = total + 0.5 * h_vec[j] * jnp.dot(d, d)
    return total


def rates_at(spec: ModelSpec, packed, t: int, age_class: int, w: float | None = None):
    """``(phi, p, lambda)`` at occasion ``t`` for an individual in ``age_class``.

    Entries whose occasion index is undefined for a per-occasion block
    (survival at ``t = T``, recapture/recovery at ``t = 1``) are NaN.
    """
    theta = packed.theta if isinstance(packed, PackedParams) else np.asarray(packed, float)
    if not 1 <= t <= spec.T:
        raise ValueError(f"occasion {t} outside 1..{spec.T}")
    if age_class not in range(1, spec.age_map.n_classes + 1):
        raise ValueError(f"age class {age_class} outside 1..{spec.age_map.n_classes}")
    needs_w = any(
        b.form in COVARIATE_FORMS
        for b in spec.blocks
        if b.role != "survival" or b.age_class == age_class
    )
    if needs_w and w is None:
        raise ValueError("covariate value required by a covariate-driven block")
    out = []
    for key in (f"survival[{age_class}]", "recapture", "recovery"):
        b = spec.block(key)
        tb = theta[spec.slice_of(key)]
        if b.form == "per_occasion":
            lo, hi = (1, spec.T - 1) if b.role == "survival" else (2, spec.T)
            if not lo <= t <= hi:
                out.append(float("nan"))
                continue
        B = None
        if b.form == "spline_in_covariate":
            B = eval_basis(b.basis, w)
        val = block_prob(b, jnp.asarray(tb), spec.T, t=t, w=w, B=B)
        out.append(float(val))
    return tuple(out)
