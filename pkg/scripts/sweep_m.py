"""Cross-validated metrics as a function of the number of diagnosis tokens m."""

import argparse

from pneumollm.cv import summary_markdown, sweep_m
from pneumollm.data import generate_synthetic
from pneumollm.model import ModelConfig
from pneumollm.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sep", type=float, default=3.0)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--m", default="1,2,3,4,5,6,7,8")
    args = ap.parse_args()

    ds = generate_synthetic(separation=args.sep, seed=0)
    ms = [int(v) for v in args.m.split(",")]
    out = sweep_m(ds, ms, ModelConfig(), TrainConfig(epochs=args.epochs), k=5)
    print(summary_markdown(out))


if __name__ == "__main__":
    main()
