#!/usr/bin/env python3
"""Run every ablation group at a reduced budget and write the tables."""

import argparse
import os

from hgformer import ToyDatasetSpec, TrainConfig, make_toy_dataset, variant
from hgformer.ablation import ablation_arms, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=14)
    ap.add_argument("--samples-per-class", type=int, default=50)
    ap.add_argument("--out", default="ablation_results")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    base = variant("Micro", n_classes=4)
    cfg = TrainConfig(epochs=args.epochs, batch_size=16, warmup_epochs=1, seed=0)
    for group, noise in (("construction", 0.25), ("distance", 0.05), ("architecture", 0.05)):
        dataset = make_toy_dataset(
            ToyDatasetSpec(n_classes=4, samples_per_class=args.samples_per_class, noise_std=noise, seed=0)
        )
        table = run_ablation(ablation_arms(group, base), dataset, cfg, n_seeds=args.seeds, log=print)
        path = os.path.join(args.out, f"{group}.csv")
        with open(path, "w") as f:
            f.write(table.to_csv())
        print(f"\n== {group} (noise_std={noise}) -> {path}")
        for arm, s in table.summary().items():
            print(f"  {arm:18s} {s['mean_acc']:.3f} +/- {s['std_acc']:.3f}")


if __name__ == "__main__":
    main()
