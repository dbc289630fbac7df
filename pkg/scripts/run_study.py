"""Replicated simulation study with CV and AIC_p smoothing selection.

Writes per-replication records to a resumable cache and a summary JSON.

    python scripts/run_study.py --replications 20 --cache results/study_cache.json
"""

import argparse
import json
import logging
import sys

from cjsmooth.study import StudyConfig, run_study


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replications", type=int, default=20)
    ap.add_argument("--cache", default="results/study_cache.json")
    ap.add_argument("--summary", default="results/study_summary.json")
    ap.add_argument("--restarts", type=int, default=5)
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.ERROR)

    cfg = StudyConfig(replications=args.replications, restarts=args.restarts)

    def progress(rec):
        print(f"rep {rec['rep']:3d}  h_cv={rec['cv_best_h']}  h_aic={rec['aic_best_h']}  "
              f"ise_cv={[round(x, 4) for x in rec['ise_cv']]}  {rec['seconds']:.0f}s", flush=True)

    summary = run_study(cfg, cache_path=args.cache, progress=progress)
    with open(args.summary, "w") as fh:
        json.dump(summary, fh, indent=2)
    for k, v in summary.items():
        if k.startswith("mise"):
            print(f"{k}: {v:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
