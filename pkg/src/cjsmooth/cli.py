"""
Command-line interface: ``cjsmooth {fit, select, bootstrap, simulate}``.

Exit codes: 0 success, 1 input or configuration error, 2 fit finished but did
not converge (results are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
CURVE_POINTS = 200


class InputError(Exception):
    """Bad arguments or files; reported and mapped to exit code 1."""


def _set_threads(n):
    # must run before jax initializes its backend
    if n is not None:
        if n < 1:
            raise InputError("--threads must be >= 1")
        flags = os.environ.get("XLA_FLAGS", "")
        if n == 1 and "multi_thread_eigen" not in flags:
            os.environ["XLA_FLAGS"] = (flags + " --xla_cpu_multi_thread_eigen=false").strip()
        os.environ.setdefault("OMP_NUM_THREADS", str(n))


def _parse_h(text: str) -> list:
    try:
        return [_parse_number(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"cannot parse smoothing parameters {text!r}: {exc}") from None


def _parse_number(x: str) -> float:
    x = x.strip()
    if x.startswith("2^"):
        return 2.0 ** float(x[2:])
    return float(x)


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def _load_data(args):
    from .data import read_arrays, read_histories, sniff_kind

    kind = sniff_kind(args.data)
    if kind == "histories":
        return read_histories(args.data)
    if kind == "m_array":
        return read_arrays(args.data, getattr(args, "d_array", None), getattr(args, "covariate", None))
    raise InputError(f"{args.data}: pass the m-array file as --data and the d-array as --d-array")


def _load_spec(path):
    from .model import ModelSpec

    try:
        with open(path) as fh:
            return ModelSpec.from_json(fh.read())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: invalid model specification: {exc}") from None


def _covariate_values(problem) -> np.ndarray:
    data = problem.data
    if problem.spec.regime == "array_global":
        return np.asarray(data.covariate, float)
    return np.concatenate([h.covariates[np.isfinite(h.covariates)] for h in data])


def write_curves(path, fit, problem) -> None:
    """Fitted curves on 200 points over the trimmed observed covariate range."""
    from .simgen import trimmed_range
    from .uncertainty import curve

    keys = fit.spec.smooth_keys
    with open(path, "w") as fh:
        fh.write("smooth,w,estimate\n")
        if not keys:
            return
        lo, hi = trimmed_range(_covariate_values(problem))
        w = np.linspace(lo, hi, CURVE_POINTS)
        for key in keys:
            for wi, v in zip(w, curve(fit, key, w)):
                fh.write(f"{key},{wi!r},{float(v)!r}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    from .fit import FitOptions, maximize
    from .problem import Problem

    spec = _load_spec(args.spec)
    data = _load_data(args)
    if args.h == "from-select":
        path = args.best_h or os.path.join(args.out, "best_h.json")
        try:
            with open(path) as fh:
                h = json.load(fh)["best_h"]
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"{path}: cannot read best-h document: {exc}") from None
    else:
        h = _parse_h(args.h)
    problem = Problem(spec, data)
    if len(h) != problem.spec.n_smooths:
        raise InputError(f"model has {problem.spec.n_smooths} smooths, got {len(h)} values for --h")
    fit = maximize(problem, h, FitOptions(restarts=args.restarts, seed=args.seed, max_iter=args.max_iter))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "fit.json"), "w") as fh:
        fh.write(fit.to_json() + "\n")
    write_curves(os.path.join(args.out, "curves.csv"), fit, problem)
    if not fit.converged:
        print(f"warning: fit did not converge (gradient {fit.gradient_norm:.3g})", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_select(args) -> int:
    from .fit import FitOptions
    from .model import SCHEMA_VERSION
    from .problem import Problem
    from .smoothing import (AICUnavailableError, CVOptions, aic_grid, cartesian_grid, kfold_cv_histories,
                            loo_cv_array, staged_cv)

    spec = _load_spec(args.spec)
    data = _load_data(args)
    problem = Problem(spec, data)
    regime = problem.spec.regime
    if args.method == "loo-array" and regime != "array_global":
        raise InputError("loo-array selection needs m-/d-array data in the array regime")
    if args.method in ("kfold", "staged") and regime == "array_global":
        raise InputError(f"{args.method} selection needs encounter histories")
    values = _parse_h(args.grid)
    if not values:
        raise InputError("empty --grid")
    n = problem.spec.n_smooths
    fit_opts = FitOptions(restarts=args.restarts, seed=args.seed)
    opts = CVOptions(fit=fit_opts)
    os.makedirs(args.out, exist_ok=True)
    if args.method == "staged":
        res = staged_cv(problem, None, values, stages=args.stages, seed=args.seed, k=args.k,
                        calib_frac=args.calib_frac, options=opts)
        best = res.best_h
        rows = [r for stage in res.results for sel in stage for r in sel.table]
        _write_table(os.path.join(args.out, "scores.csv"), rows, n)
    else:
        try:
            grid = cartesian_grid(values, n, allow_large=args.full_grid)
        except ValueError as exc:
            raise InputError(str(exc)) from None
        if args.method == "loo-array":
            sel = loo_cv_array(problem, None, grid, opts)
        elif args.method == "kfold":
            sel = kfold_cv_histories(problem, None, grid, k=args.k, calib_frac=args.calib_frac,
                                     seed=args.seed, options=opts)
        else:
            try:
                sel = aic_grid(None, problem, grid, fit_opts)
            except AICUnavailableError as exc:
                raise InputError(str(exc)) from None
        best = sel.best_h
        sel.write_csv(os.path.join(args.out, "scores.csv"))
    _write_json(os.path.join(args.out, "best_h.json"),
                {"schema_version": SCHEMA_VERSION, "method": args.method,
                 "smooths": list(problem.spec.smooth_keys), "best_h": list(best)})
    return EXIT_OK


def _write_table(path, rows, n_h) -> None:
    from .smoothing import SelectionResult

    SelectionResult(tuple([0.0] * n_h), rows, {}).write_csv(path)


def cmd_bootstrap(args) -> int:
    from .data import MDArrays
    from .fit import FitResult
    from .problem import Problem
    from .simgen import trimmed_range
    from .uncertainty import (nonparam_bootstrap, param_bootstrap, pointwise_band, simultaneous_band,
                              write_band_csv, write_replicate_summary)

    if not 0.0 < args.level < 1.0:
        raise InputError("--level must lie in (0, 1)")
    if args.B < 1:
        raise InputError("--B must be >= 1")
    try:
        with open(args.fit) as fh:
            fit = FitResult.from_dict(json.load(fh))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{args.fit}: invalid fit document: {exc}") from None
    data = _load_data(args)
    if args.kind == "parametric" and not isinstance(data, MDArrays):
        raise InputError("parametric bootstrap needs m-/d-array data")
    if args.kind == "nonparametric" and isinstance(data, MDArrays):
        raise InputError("nonparametric bootstrap needs encounter histories")
    problem = Problem(fit.spec, data)
    if args.kind == "parametric":
        boot = param_bootstrap(data, fit, args.B, seed=args.seed)
    else:
        boot = nonparam_bootstrap(problem, None, fit.h_vec, args.B, seed=args.seed, fit=fit)
    os.makedirs(args.out, exist_ok=True)
    write_replicate_summary(os.path.join(args.out, "replicates.csv"), boot)
    lo, hi = trimmed_range(_covariate_values(problem))
    w = np.linspace(lo, hi, CURVE_POINTS)
    bands = {}
    for key in fit.spec.smooth_keys:
        pw = pointwise_band(boot, key, w, args.level, estimate=fit)
        sim = simultaneous_band(boot, pw, key) if args.band == "simultaneous" else None
        bands[key] = (pw, sim)
    write_band_csv(os.path.join(args.out, "bands.csv"), bands)
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .data import write_histories
    from .simgen import SimConfig, config_json, simulate_dataset, simulation_spec, write_truth

    if args.replications < 1:
        raise InputError("--replications must be >= 1")
    cfg = SimConfig()
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = SimConfig.from_dict(json.load(fh))
        except (OSError, ValueError, TypeError) as exc:
            raise InputError(f"{args.config}: invalid simulation config: {exc}") from None
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
        fh.write(config_json(cfg) + "\n")
    with open(os.path.join(args.out_dir, "spec.json"), "w") as fh:
        fh.write(simulation_spec(cfg, K=args.K, m=args.m).to_json() + "\n")
    for rep in range(args.replications):
        ds = simulate_dataset(replace(cfg, seed=cfg.seed + rep))
        tag = f"_{rep + 1:03d}" if args.replications > 1 else ""
        write_histories(os.path.join(args.out_dir, f"histories{tag}.csv"), ds.histories)
        write_truth(os.path.join(args.out_dir, f"truth{tag}.csv"), ds.truth)
    if args.study:
        from .study import StudyConfig, run_study

        study = StudyConfig(sim=cfg, replications=args.replications, K=args.K, m=args.m,
                            restarts=args.restarts)
        summary = run_study(study, cache_path=os.path.join(args.out_dir, "study_cache.json"))
        _write_json(os.path.join(args.out_dir, "summary.json"), summary)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cjsmooth", description="Semiparametric mark-recapture-recovery models")
    ap.add_argument("--threads", type=int, default=None, help="CPU threads for the numerical backend")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--data", required=True, help="history CSV or m-array CSV")
        p.add_argument("--d-array", help="d-array CSV (array data)")
        p.add_argument("--covariate", help="global covariate CSV (array data)")

    p = sub.add_parser("fit", help="fit a model at fixed smoothing parameters")
    p.add_argument("--spec", required=True)
    data_args(p)
    p.add_argument("--h", required=True, help='comma list (e.g. "2^4,0.5") or "from-select"')
    p.add_argument("--best-h", help="best-h JSON for --h from-select (default OUT/best_h.json)")
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="select smoothing parameters")
    p.add_argument("--spec", required=True)
    data_args(p)
    p.add_argument("--method", required=True, choices=["loo-array", "kfold", "staged", "aic"])
    p.add_argument("--grid", default="2^-2,2^0,2^2,2^4,2^6,2^8,2^10", help="per-smooth candidate values")
    p.add_argument("--full-grid", action="store_true", help="allow a full grid over 3 or more smooths")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--calib-frac", type=float, default=0.9)
    p.add_argument("--stages", type=int, default=2)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("bootstrap", help="bootstrap confidence bands for a fit")
    p.add_argument("--fit", required=True)
    data_args(p)
    p.add_argument("--B", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["parametric", "nonparametric"], default="nonparametric")
    p.add_argument("--band", choices=["pointwise", "simultaneous"], default="simultaneous")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("simulate", help="simulate datasets (optionally run the study)")
    p.add_argument("--config", help="SimConfig JSON (default: two-age-class design)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--replications", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--K", type=int, default=15)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--study", action="store_true", help="select, fit and score every replication")
    p.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    from .data import DataFormatError

    try:
        _set_threads(args.threads)
        return args.func(args)
    except (InputError, DataFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
