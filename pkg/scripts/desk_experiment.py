#!/usr/bin/env python3
"""Desk-scale training run: corpus -> synth -> train -> held-out audits.

    python3 scripts/desk_experiment.py --out runs/desk --steps 2000 --crop 64

Writes the corpus, datasets, training log and checkpoints under --out, and a
summary in <out>/desk_result.json.
"""
import argparse
import dataclasses
import json
import logging

from threadpoolctl import threadpool_limits

from uec import desk
from uec.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--crop", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--per-source", type=int, default=8, help="crops cut from each bundled photo")
    ap.add_argument("--size", type=int, default=160, help="side of each corpus crop")
    ap.add_argument("--alpha2", type=float, default=1.0)
    ap.add_argument("--alpha3", type=float, default=0.1)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = TrainConfig(steps=args.steps, crop=args.crop, seed=args.seed, alpha2=args.alpha2,
                      alpha3=args.alpha3, checkpoint_every=max(1, args.steps // 4))
    with threadpool_limits(1):
        res, _ = desk.run_experiment(args.out, cfg, args.per_source, args.size)
    print(json.dumps(dataclasses.asdict(res), indent=2))
    gain = res.pretext_model_psnr - res.pretext_identity_psnr
    print(f"pretext gain {gain:+.2f} dB, sweep monotone {res.monotone_fraction:.3f}, "
          f"train {res.train_seconds:.0f}s")


if __name__ == "__main__":
    main()
