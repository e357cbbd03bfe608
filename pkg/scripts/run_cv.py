"""Grouped five-fold CV on a fresh synthetic cohort; prints per-fold and mean metrics.

    python scripts/run_cv.py --sep 6 --epochs 100
"""

import argparse
import time

from pneumollm.cv import metrics_csv, run_cv
from pneumollm.data import generate_synthetic
from pneumollm.metrics import mean_report
from pneumollm.model import ModelConfig
from pneumollm.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sep", type=float, default=6.0)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--m", type=int, default=4)
    ap.add_argument("--no-emitter", action="store_true")
    ap.add_argument("--parallel-folds", action="store_true")
    args = ap.parse_args()

    ds = generate_synthetic(separation=args.sep, seed=args.seed)
    cfg = ModelConfig(m=args.m, emitter=not args.no_emitter, seed=args.seed)
    start = time.perf_counter()
    results = run_cv(ds, cfg, TrainConfig(epochs=args.epochs, seed=args.seed), k=5,
                     seed=args.seed, parallel=args.parallel_folds)
    rows = [("cv", str(r.fold), r.report) for r in results]
    print(metrics_csv(rows, {"cv": mean_report([r.report for r in results])}), end="")
    print(f"# {time.perf_counter() - start:.1f}s")


if __name__ == "__main__":
    main()
