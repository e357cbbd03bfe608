"""Train briefly, then print one sample's context map and last-layer attention.

Shows that source-token queries put zero weight on diagnosis keys while each
diagnosis query spreads its weight over the source tokens only.
"""

import argparse

import numpy as np

from pneumollm.data import generate_synthetic
from pneumollm.emitter import StackTrace
from pneumollm.engine import context_maps
from pneumollm.model import ModelConfig, PneumoModel
from pneumollm.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--sample", type=int, default=0)
    args = ap.parse_args()

    ds = generate_synthetic(separation=6.0, seed=0)
    model, trace = train(PneumoModel.create(ModelConfig()), ds.features, ds.labels,
                         TrainConfig(epochs=args.epochs))
    print("loss per epoch:", np.round(trace, 4))
    x = model.encoder.encode_batch(ds.features[args.sample:args.sample + 1])
    st = StackTrace()
    _, mix = model.features(x, trace=st)
    np.set_printoptions(precision=3, suppress=True)
    print("context map (source x diagnosis):")
    print(context_maps(mix, 1, model.config.m)[0])
    print("last layer, head 0 attention (query x key):")
    print(st.attention[-1][0][0])


if __name__ == "__main__":
    main()
