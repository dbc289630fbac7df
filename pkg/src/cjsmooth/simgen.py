"""
Simulation of mark-recapture-recovery data with an individual covariate that
follows an age-structured mean-reverting AR(1) process, plus the error
summaries used to judge fitted survival curves.

The default configuration is the two-age-class design with a threshold-type
survival curve for young animals and a sinusoidal one for adults.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .data import EncounterHistory, MDArrays
from .model import AgeClassMap, ModelSpec, ParamBlock


def true_phi(cls, w):
    """Generating survival curves: ``threshold`` (class 1) and ``sine`` (class 2)."""
    return survival_function("threshold" if cls == 1 else "sine", w)


def survival_function(name: str, w):
    w = np.asarray(w, dtype=float)
    if name == "threshold":
        lp = np.where(w < 0.5, 2.0 - 0.3 * (w - 0.5) ** 2, 2.0)
    elif name == "sine":
        lp = np.sin(2.5 * (w + 0.8) + 0.45) + 1.3 + 0.7 * w
    else:
        match = re.fullmatch(r"linear\(([-+.\deE]+),\s*([-+.\deE]+)\)", name.replace(" ", ""))
        if match is None:
            raise ValueError(f"unknown survival function {name!r}")
        lp = float(match.group(1)) + float(match.group(2)) * w
    out = expit(lp)
    return float(out) if out.ndim == 0 else out


@dataclass
class SimConfig:
    N: int = 600
    T: int = 10
    p: float | list = 0.6
    lam: float | list = 0.4
    mu0: float = -1.4
    sigma0: float = 0.4
    mu: tuple = (1.0, 1.3)
    sigma: tuple = (0.5, 0.4)
    eta: tuple = (0.5, 0.8)
    age_boundaries: tuple = (2,)
    survival: tuple = ("threshold", "sine")
    seed: int = 1

    def __post_init__(self):
        self.mu, self.sigma, self.eta = tuple(self.mu), tuple(self.sigma), tuple(self.eta)
        self.age_boundaries, self.survival = tuple(self.age_boundaries), tuple(self.survival)
        nc = len(self.age_boundaries) + 1
        if not (len(self.mu) == len(self.sigma) == len(self.eta) == len(self.survival) == nc):
            raise ValueError(f"need {nc} per-class values for mu, sigma, eta and survival")
        for name in ("p", "lam"):
            v = np.atleast_1d(np.asarray(getattr(self, name), float))
            # the closed interval allows fully observed or recovery-free designs
            if v.size not in (1, self.T - 1) or np.any((v < 0) | (v > 1)):
                raise ValueError(f"{name} must be a probability or T-1 probabilities in [0, 1]")
        if self.sigma0 <= 0 or any(s <= 0 for s in self.sigma):
            raise ValueError("standard deviations must be positive")
        if any(not 0 < e < 2 for e in self.eta):
            raise ValueError("eta values must lie in (0, 2)")
        if self.N < 1 or self.T < 2:
            raise ValueError("need N >= 1 and T >= 2")
        for s in self.survival:
            survival_function(s, 0.0)

    @property
    def age_map(self) -> AgeClassMap:
        return AgeClassMap(self.age_boundaries)

    def rate(self, name: str, t: int) -> float:
        """Recapture / recovery probability at occasion ``t`` (2..T)."""
        v = np.atleast_1d(np.asarray(getattr(self, name), float))
        return float(v[0] if v.size == 1 else v[t - 2])

    def truth_natural(self) -> dict:
        nc = self.age_map.n_classes
        out = {"covproc_mu0": self.mu0, "covproc_sigma0": self.sigma0}
        for a in range(1, nc + 1):
            out[f"covproc_mu[{a}]"] = self.mu[a - 1]
            out[f"covproc_sigma[{a}]"] = self.sigma[a - 1]
            out[f"covproc_eta[{a}]"] = self.eta[a - 1]
        for key, name in (("recapture", "p"), ("recovery", "lam")):
            v = np.atleast_1d(np.asarray(getattr(self, name), float))
            out[key] = float(v[0]) if v.size == 1 else v
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("p", "lam"):
            if isinstance(d[k], np.ndarray):
                d[k] = d[k].tolist()
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SimTruth:
    """Hidden states: alive flags and full covariate paths (NaN when dead or unborn)."""

    alive: np.ndarray
    covariate: np.ndarray
    death_interval: np.ndarray   # occasion s of death in (s-1, s]; 0 if alive at T


@dataclass
class SimDataset:
    histories: list
    truth: SimTruth
    config: SimConfig = field(repr=False, default=None)

    def survival_covariates(self, cls: int) -> np.ndarray:
        """Covariate values at which class-``cls`` survival was applied."""
        cfg = self.config
        out = []
        for i, h in enumerate(self.histories):
            c = h.first_capture
            for t in range(c, cfg.T):
                if self.truth.alive[i, t - 1] and cfg.age_map.class_of(t - c) == cls:
                    out.append(self.truth.covariate[i, t - 1])
        return np.asarray(out)


def covariate_step(w, mu, sigma, eta, eps):
    """One mean-reverting AR(1) step of the covariate."""
    return w + eta * (mu - w) + sigma * eps


def covariate_path(w0: float, mu: float, sigma: float, eta: float, n: int, rng) -> np.ndarray:
    """``n`` successive covariate values from ``w0`` under fixed class parameters."""
    out = np.empty(n)
    w = w0
    for i, eps in enumerate(rng.standard_normal(n)):
        w = covariate_step(w, mu, sigma, eta, eps)
        out[i] = w
    return out


def _simulate_one(rng, cfg: SimConfig, age_map: AgeClassMap):
    T = cfg.T
    codes = np.zeros(T, dtype=int)
    cov = np.full(T, np.nan)
    alive = np.zeros(T, dtype=bool)
    path = np.full(T, np.nan)
    c = int(rng.integers(1, T))
    w = rng.normal(cfg.mu0, cfg.sigma0)
    codes[c - 1], cov[c - 1], alive[c - 1], path[c - 1] = 1, w, True, w
    death = 0
    for t in range(c, T):
        cls = age_map.class_of(t - c)
        phi = survival_function(cfg.survival[cls - 1], w)
        u_surv, u_obs, eps = rng.random(), rng.random(), rng.standard_normal()
        if u_surv < phi:
            nxt = age_map.class_of(t + 1 - c) - 1
            w = covariate_step(w, cfg.mu[nxt], cfg.sigma[nxt], cfg.eta[nxt], eps)
            alive[t], path[t] = True, w
            if u_obs < cfg.rate("p", t + 1):
                codes[t], cov[t] = 1, w
        else:
            death = t + 1
            if u_obs < cfg.rate("lam", t + 1):
                codes[t] = 2
            break
    return codes, cov, alive, path, death


def simulate_dataset(cfg: SimConfig) -> SimDataset:
    """Simulate ``cfg.N`` histories; individual ``i`` uses its own RNG substream."""
    age_map = cfg.age_map
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.N)
    hists, alive, paths, deaths = [], [], [], []
    for i, ss in enumerate(streams):
        codes, cov, a, path, death = _simulate_one(np.random.default_rng(ss), cfg, age_map)
        hists.append(EncounterHistory(codes, cov, id=str(i + 1)))
        alive.append(a)
        paths.append(path)
        deaths.append(death)
    truth = SimTruth(np.array(alive), np.array(paths), np.array(deaths))
    return SimDataset(hists, truth, cfg)


def write_truth(path, truth: SimTruth) -> None:
    T = truth.alive.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(["id", "death"] + [f"alive_{t}" for t in range(1, T + 1)]
                          + [f"w_{t}" for t in range(1, T + 1)]) + "\n")
        for i in range(truth.alive.shape[0]):
            cells = [str(i + 1), str(int(truth.death_interval[i]))]
            cells += [str(int(a)) for a in truth.alive[i]]
            cells += ["NA" if not np.isfinite(v) else repr(float(v)) for v in truth.covariate[i]]
            fh.write(",".join(cells) + "\n")


# ---------------------------------------------------------------------------
# model matching the simulation design


def simulation_spec(cfg: SimConfig, K: int = 15, m: int = 50, survival_form: str = "spline_in_covariate",
                    grid=None) -> ModelSpec:
    nc = cfg.age_map.n_classes
    blocks = []
    for a in range(1, nc + 1):
        blocks.append(ParamBlock("survival", survival_form, age_class=a,
                                 K=K if survival_form == "spline_in_covariate" else None))
    per_occ = np.atleast_1d(np.asarray(cfg.p)).size > 1
    blocks.append(ParamBlock("recapture", "per_occasion" if per_occ else "constant"))
    per_occ = np.atleast_1d(np.asarray(cfg.lam)).size > 1
    blocks.append(ParamBlock("recovery", "per_occasion" if per_occ else "constant"))
    blocks += [ParamBlock("covproc_mu0"), ParamBlock("covproc_sigma0")]
    for role in ("covproc_mu", "covproc_sigma", "covproc_eta"):
        blocks += [ParamBlock(role, age_class=a) for a in range(1, nc + 1)]
    return ModelSpec(T=cfg.T, regime="hmm_timevarying", age_map=cfg.age_map, blocks=tuple(blocks),
                     hmm_bins=m, hmm_grid=grid)


# ---------------------------------------------------------------------------
# analogs of the two real-data designs


def soay_shaped_config(N: int = 1000, seed: int = 1) -> SimConfig:
    """Four age classes (lamb, yearling, adult, senior), 25 occasions,
    occasion-specific recapture and recovery; covariate is body weight in
    units of 10 kg."""
    T = 25
    t = np.arange(2, T + 1)
    p = np.round(0.7 + 0.2 * np.sin(0.7 * t), 4)
    lam = np.round(0.4 + 0.15 * np.cos(0.5 * t), 4)
    return SimConfig(
        N=N, T=T, p=p.tolist(), lam=lam.tolist(),
        mu0=1.3, sigma0=0.25,
        mu=(1.3, 1.8, 2.4, 2.3), sigma=(0.2, 0.2, 0.15, 0.2), eta=(0.5, 0.6, 0.7, 0.6),
        age_boundaries=(1, 2, 7),
        survival=("linear(-5, 3.5)", "linear(-2, 2.2)", "linear(0.5, 0.8)", "linear(-1.5, 1.2)"),
        seed=seed,
    )


HERON_FROST_MAX = 57.0


def heron_shaped_spec(T: int = 30, K: int = 7) -> ModelSpec:
    """Recovery-only arrays: three age classes with spline survival in a global
    covariate on [0, 57], recapture fixed at 0, recovery logistic-linear in time."""
    dom = (0.0, HERON_FROST_MAX)
    blocks = [ParamBlock("survival", "spline_in_covariate", age_class=a, K=K, domain=dom)
              for a in (1, 2, 3)]
    blocks += [ParamBlock("recapture", "fixed", value=0.0),
               ParamBlock("recovery", "logistic_linear_in_time")]
    return ModelSpec(T=T, regime="array_global", age_map=AgeClassMap((1, 2)), blocks=tuple(blocks))


def heron_truth(cls: int, frost):
    """Survival in the heron-shaped analog (first-year birds suffer most from frost)."""
    x = np.asarray(frost, float)
    lp = {1: 0.6 - 0.05 * x, 2: 1.4 - 0.035 * x, 3: 2.0 - 0.0009 * x ** 2}[cls]
    return expit(lp)


def heron_shaped_truth_theta(spec: ModelSpec, recovery=(-1.6, -0.4)) -> np.ndarray:
    theta = np.zeros(spec.n_params)
    for a in (1, 2, 3):
        b = spec.block(f"survival[{a}]")
        g = b.basis.greville()
        theta[spec.slice_of(b.key)] = np.log(heron_truth(a, g)) - np.log1p(-heron_truth(a, g))
    theta[spec.slice_of("recovery")] = recovery
    return theta


def simulate_heron_shaped(T: int = 30, releases: int = 400, seed: int = 1, K: int = 7):
    """Frost-day series, spec, true theta and a simulated recovery-only dataset."""
    from .problem import Problem
    from .uncertainty import draw_arrays

    rng = np.random.default_rng(seed)
    frost = np.clip(np.round(rng.gamma(2.0, 7.0, size=T)), 0, HERON_FROST_MAX)
    spec = heron_shaped_spec(T, K)
    placeholder = MDArrays(np.zeros((T - 1, T)), np.zeros((T - 1, T - 1)), covariate=frost)
    problem = Problem(spec, placeholder)
    theta = heron_shaped_truth_theta(problem.spec)
    q_m, q_d = problem.cell_probs(theta)
    data = draw_arrays(q_m, q_d, np.full(T - 1, releases), rng, covariate=frost)
    return data, problem.spec, theta


# ---------------------------------------------------------------------------
# error summaries


def trimmed_range(values, q: float = 0.005) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    return float(np.quantile(v, q)), float(np.quantile(v, 1 - q))


def integrated_squared_error(estimate, truth, w_range, n_points: int = 512) -> float:
    w = np.linspace(w_range[0], w_range[1], n_points)
    return float(np.trapezoid((np.asarray(estimate(w)) - np.asarray(truth(w))) ** 2, w))


def mise(curve_estimates, cls: int, w_range, truth=None, n_points: int = 512) -> float:
    """Average integrated squared error of fitted survival curves.

    ``curve_estimates`` are callables ``w -> phi_hat(w)``; ``w_range`` is a
    single ``(lo, hi)`` pair or one pair per replication.
    """
    if len(curve_estimates) == 0:
        raise ValueError("need at least one replication")
    truth = truth or (lambda w: true_phi(cls, w))
    ranges = w_range if np.ndim(w_range) == 2 else [w_range] * len(curve_estimates)
    errs = [integrated_squared_error(f, truth, r, n_points) for f, r in zip(curve_estimates, ranges)]
    return float(np.mean(errs))


BIAS_PARAMETERS = (
    ("lambda", "recovery"), ("p", "recapture"),
    ("mu_0", "covproc_mu0"), ("mu_1", "covproc_mu[1]"), ("mu_2", "covproc_mu[2]"),
    ("sigma_0", "covproc_sigma0"), ("sigma_1", "covproc_sigma[1]"), ("sigma_2", "covproc_sigma[2]"),
    ("eta_1", "covproc_eta[1]"), ("eta_2", "covproc_eta[2]"),
)


def bias_table(estimates, truth, parameters=BIAS_PARAMETERS) -> list[dict]:
    """Mean relative bias (percent) and across-replication SD per parameter.

    ``estimates`` is a list of natural-parameter dicts (or fit results) and
    ``truth`` a natural-parameter dict or :class:`SimConfig`.
    """
    if len(estimates) < 2:
        raise ValueError("need at least two replications")
    if isinstance(truth, SimConfig):
        truth = truth.truth_natural()
    rows = []
    for label, key in parameters:
        vals = np.array([float((e.natural() if hasattr(e, "natural") else e)[key]) for e in estimates])
        true = float(truth[key])
        row = {"parameter": label, "key": key, "truth": true, "mean": float(vals.mean()),
               "mstd": float(vals.std(ddof=1))}
        if true == 0:
            row.update(mrb=float(np.mean(vals - true)), absolute=True)
        else:
            row.update(mrb=float(100.0 * np.mean((vals - true) / true)), absolute=False)
        rows.append(row)
    return rows


def config_json(cfg: SimConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)
