"""Minimal training CLI: dataset directories in, weight archive out."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .data import load_dataset, merge_datasets
from .losses import LossConfig
from .train import TrainConfig, train


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="cellstorm-train", description=__doc__)
    parser.add_argument(
        "datasets", nargs="+", help="paired-stack dataset directories (mixed equally)"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--iterations", type=int)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch", type=int, default=4)
    parser.add_argument("--depth", type=int, default=3)
    parser.add_argument("--filters", type=int, default=32)
    parser.add_argument("--psf-sigma-px", type=float, default=1.0)
    args = parser.parse_args(argv)

    parts = [load_dataset(d) for d in args.datasets]
    if len(parts) == 1:
        dataset = parts[0]
    else:
        fractions = [1.0 / len(parts)] * len(parts)
        dataset = merge_datasets(parts, fractions, np.random.default_rng(args.seed))
    result = train(
        dataset,
        TrainConfig(
            batch_size=args.batch,
            epochs=args.epochs,
            iterations=args.iterations,
            depth=args.depth,
            first_layer_filters=args.filters,
        ),
        LossConfig(psf_sigma_px=args.psf_sigma_px),
        seed=args.seed,
        out_dir=args.out,
    )
    print(f"archive: {result.archive_dir}")
    print(f"loss curves: {result.loss_csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
