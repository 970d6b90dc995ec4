#!/usr/bin/env python3
"""Throughput and scaling sweep across variants."""

import argparse
import json

from hgformer import variant
from hgformer.bench import attention_complexity_scan, bench_throughput, construction_complexity_scan


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--variants", nargs="+", default=["Micro", "T"])
    ap.add_argument("--image-size", type=int, default=32)
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--timed-iters", type=int, default=5)
    args = ap.parse_args()

    for name in args.variants:
        r = bench_throughput(
            variant(name, n_classes=4),
            image_size=args.image_size,
            batch=args.batch,
            timed_iters=args.timed_iters,
        )
        tim = r["timing"]
        print(
            f"{name:6s} {tim['images_per_s']:8.2f} images/s  "
            f"flops/img {r['deterministic']['flops_per_image']:.2e}  "
            f"breakdown {json.dumps({k: round(v, 3) for k, v in tim['per_op_s'].items()})}"
        )
    print("\nattention interaction-term scaling:")
    print(json.dumps({k: v["max_residual"] for k, v in attention_complexity_scan().items()}, indent=2))
    print("construction scaling:")
    print(json.dumps({k: v["max_residual"] for k, v in construction_complexity_scan().items()}, indent=2))


if __name__ == "__main__":
    main()
