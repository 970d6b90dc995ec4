#!/usr/bin/env python3
"""Train the Micro variant on the default toy task and print the report."""

import argparse
import json

from hgformer import ToyDatasetSpec, TrainConfig, make_toy_dataset, train, variant


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--noise-std", type=float, default=0.05)
    ap.add_argument("--early-stop-acc", type=float, default=None)
    ap.add_argument("--out", default=None, help="optional directory for best.ckpt")
    args = ap.parse_args()

    dataset = make_toy_dataset(ToyDatasetSpec(noise_std=args.noise_std, seed=args.seed))
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, early_stop_val_acc=args.early_stop_acc)
    report = train(variant("Micro", n_classes=4), dataset, cfg, out_dir=args.out, log=print)
    print(json.dumps(report.deterministic_dict() | report.timing_dict(), indent=2))


if __name__ == "__main__":
    main()
