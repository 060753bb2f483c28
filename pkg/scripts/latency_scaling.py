#!/usr/bin/env python3
"""Single-thread apply() latency across resolutions.

    python3 scripts/latency_scaling.py [--checkpoint runs/desk/run/model.ueck]
"""
import argparse

from uec import metrics as X
from uec import model as M

SIZES = [(256, 256), (512, 512), (1080, 1920), (2160, 3840)]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--checkpoint")
    ap.add_argument("--iters", type=int, default=10)
    args = ap.parse_args()
    model = M.load(args.checkpoint) if args.checkpoint else M.init_model(0)
    prev = None
    print(f"{'resolution':>12} {'median ms':>10} {'p95 ms':>10} {'MP/s':>7} {'x prev':>7}")
    for h, w in SIZES:
        s = X.bench(model, (h, w), args.iters)
        ratio = "" if prev is None else f"{s['median_ms'] / prev:.2f}"
        print(f"{w:>5}x{h:<6} {s['median_ms']:>10.2f} {s['p95_ms']:>10.2f} {s['mpix_per_s']:>7.1f} {ratio:>7}")
        prev = s["median_ms"]


if __name__ == "__main__":
    main()
