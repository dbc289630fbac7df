"""
Replicated simulation study: simulate, select smoothing parameters by
k-fold CV and by AIC_p, fit, and score the survival curves by integrated
squared error.

The AIC_p route reuses the full-data fits made along the CV grid (same data,
same grid), so both routes cost one pass over the grid.  Per-replication
records are appended to a JSON cache so an interrupted study resumes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .fit import FitOptions
from .problem import Problem
from .simgen import (SimConfig, bias_table, integrated_squared_error, simulate_dataset,
                     simulation_spec, survival_function, trimmed_range)
from .smoothing import (DEFAULT_GRID_1D, AICUnavailableError, CVOptions, aic_select, cartesian_grid,
                        kfold_cv_histories)
from .uncertainty import curve

log = logging.getLogger(__name__)

STUDY_SCHEMA_VERSION = 1


@dataclass
class StudyConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    replications: int = 20
    K: int = 15
    m: int = 50
    grid_1d: tuple = DEFAULT_GRID_1D
    k: int = 10
    calib_frac: float = 0.9
    restarts: int = 5
    tol: float = 1e-6
    mise_range: str = "class"        # per "class" or "pooled" over all classes

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.mise_range not in ("pooled", "class"):
            raise ValueError("mise_range must be 'pooled' or 'class'")
        self.grid_1d = tuple(float(x) for x in self.grid_1d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sim"] = self.sim.to_dict()
        d["grid_1d"] = list(self.grid_1d)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        d["sim"] = SimConfig.from_dict(d.get("sim", {}))
        return cls(**d)

    def digest(self) -> str:
        """Hash of everything that affects a replication's result."""
        d = self.to_dict()
        d.pop("replications")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def replication_seed(cfg: StudyConfig, rep: int) -> int:
    return int(cfg.sim.seed) * 100003 + rep


def run_replication(cfg: StudyConfig, rep: int) -> dict:
    t0 = time.time()
    sim = replace(cfg.sim, seed=replication_seed(cfg, rep))
    ds = simulate_dataset(sim)
    problem = Problem(simulation_spec(sim, K=cfg.K, m=cfg.m), ds.histories)
    nc = sim.age_map.n_classes
    grid = cartesian_grid(cfg.grid_1d, nc, allow_large=True, fits_per_point=cfg.k + 1)
    opts = CVOptions(fit=FitOptions(restarts=cfg.restarts, tol=cfg.tol, seed=rep))
    cv = kfold_cv_histories(problem, None, grid, k=cfg.k, calib_frac=cfg.calib_frac, seed=rep, options=opts)
    try:
        aic = aic_select(cv.fits)
    except AICUnavailableError:
        aic = None

    values = [ds.survival_covariates(a) for a in range(1, nc + 1)]
    if cfg.mise_range == "pooled":
        ranges = [trimmed_range(np.concatenate(values))] * nc
    else:
        ranges = [trimmed_range(v) for v in values]

    def ise(fit):
        return [integrated_squared_error(lambda w, a=a: curve(fit, a - 1, w),
                                         lambda w, a=a: survival_function(sim.survival[a - 1], w),
                                         ranges[a - 1]) for a in range(1, nc + 1)]

    best = cv.best_fit
    nat = {k: float(v) for k, v in best.natural().items() if np.ndim(v) == 0}
    return {
        "rep": rep,
        "seed": sim.seed,
        "cv_best_h": list(cv.best_h),
        "cv_converged": bool(best.converged),
        "ise_cv": ise(best),
        "aic_best_h": None if aic is None else list(aic.best_h),
        "aic_converged": None if aic is None else bool(aic.best_fit.converged),
        "ise_aic": None if aic is None else ise(aic.best_fit),
        "natural_cv": nat,
        "theta_cv": [float(x) for x in best.theta],
        "theta_aic": None if aic is None else [float(x) for x in aic.best_fit.theta],
        "w_range": [list(r) for r in ranges],
        "missing_folds": int(sum(r["score"] is None for r in cv.table)),
        "seconds": time.time() - t0,
    }


def load_cache(path, cfg: StudyConfig) -> list:
    if path is None or not os.path.exists(path):
        return []
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("config_digest") != cfg.digest():
        log.warning("cache %s was made with a different configuration; ignoring it", path)
        return []
    return doc.get("records", [])


def save_cache(path, cfg: StudyConfig, records: list) -> None:
    doc = {"schema_version": STUDY_SCHEMA_VERSION, "config_digest": cfg.digest(),
           "config": cfg.to_dict(), "records": records}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=1)
    os.replace(tmp, path)


def run_study(cfg: StudyConfig, cache_path=None, progress=None) -> dict:
    """Run (or resume) the study and return its summary."""
    records = {r["rep"]: r for r in load_cache(cache_path, cfg)}
    for rep in range(cfg.replications):
        if rep in records:
            continue
        records[rep] = run_replication(cfg, rep)
        if progress:
            progress(records[rep])
        if cache_path is not None:
            save_cache(cache_path, cfg, [records[k] for k in sorted(records)])
    return summarize(cfg, [records[k] for k in range(cfg.replications)])


def summarize(cfg: StudyConfig, records: list) -> dict:
    nc = cfg.sim.age_map.n_classes
    ise_cv = np.array([r["ise_cv"] for r in records])
    out = {"schema_version": STUDY_SCHEMA_VERSION, "replications": len(records),
           "config_digest": cfg.digest()}
    for a in range(nc):
        out[f"mise_class{a + 1}"] = float(ise_cv[:, a].mean())
    aic_recs = [r for r in records if r["ise_aic"] is not None]
    if aic_recs:
        ise_aic = np.array([r["ise_aic"] for r in aic_recs])
        for a in range(nc):
            out[f"mise_aic_class{a + 1}"] = float(ise_aic[:, a].mean())
    out["aic_available"] = len(aic_recs)
    if len(records) >= 2:
        out["bias_table"] = bias_table([r["natural_cv"] for r in records], cfg.sim)
    out["cv_best_h"] = [r["cv_best_h"] for r in records]
    out["aic_best_h"] = [r["aic_best_h"] for r in records]
    out["all_converged"] = bool(all(r["cv_converged"] for r in records))
    out["seconds_total"] = float(sum(r["seconds"] for r in records))
    return out
