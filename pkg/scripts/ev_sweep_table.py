#!/usr/bin/env python3
"""Mean output luminance for each (input EV, reference EV) on a held-out set.

    python3 scripts/ev_sweep_table.py runs/desk/run/model.ueck runs/desk/heldout
"""
import argparse

import numpy as np

from uec import isp
from uec import metrics as X
from uec import model as M


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("dataset", help="dataset dir or manifest.json; its first scene is the reference")
    args = ap.parse_args()
    model = M.load(args.checkpoint)
    _, seqs = isp.load_manifest(args.dataset)
    sweep = X.ev_sweep_audit(model, seqs[1:], seqs[0])
    ref_evs = seqs[0].evs
    in_evs = sorted({r["input_ev"] for r in sweep.rows})
    print("input EV | " + " ".join(f"ref {e:+.1f}" for e in ref_evs))
    for ev in in_evs:
        cells = [np.mean([r["mean_luminance"] for r in sweep.rows if r["input_ev"] == ev and r["ref_ev"] == re])
                 for re in ref_evs]
        print(f"{ev:+8.2f} | " + " ".join(f"{c:8.3f}" for c in cells))
    print(f"monotone fraction: {sweep.monotone_fraction:.3f}")


if __name__ == "__main__":
    main()
