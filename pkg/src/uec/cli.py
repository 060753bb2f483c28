"""Command-line entry point: ``uec <subcommand> ...``.

Exit codes are shared by every subcommand: 0 success, 1 check failure,
2 usage or input error, 3 runtime abort (non-finite training loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck as G
from . import isp
from . import metrics as X
from . import model as M
from . import training as T

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("uec")


class UsageError(Exception):
    pass


def parse_ev_grid(text: str) -> list[float]:
    try:
        evs = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"malformed --ev-grid {text!r}: expected comma-separated numbers") from None
    if not evs:
        raise UsageError("--ev-grid is empty")
    if 0.0 not in evs:
        raise UsageError("--ev-grid must contain 0")
    if any(not -5 <= e <= 5 for e in evs):
        raise UsageError("--ev-grid values must lie in [-5, 5]")
    return evs


def parse_resolution(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text.strip())
    if not m or int(m.group(1)) < 1 or int(m.group(2)) < 1:
        raise UsageError(f"malformed --resolution {text!r}: expected WIDTHxHEIGHT")
    w, h = int(m.group(1)), int(m.group(2))
    return h, w


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    evs = parse_ev_grid(args.ev_grid)
    if not Path(args.input_dir).is_dir():
        raise UsageError(f"input dir not found: {args.input_dir}")
    try:
        manifest = isp.synth_dataset(args.input_dir, args.output_dir, evs, args.jitter, args.seed)
    except isp.DatasetError as exc:
        raise UsageError(str(exc)) from exc
    n_frames = sum(len(s["frames"]) for s in manifest["scenes"])
    print(f"manifest: {Path(args.output_dir) / 'manifest.json'}")
    print(f"scenes: {len(manifest['scenes'])} frames: {n_frames}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        _, seqs = isp.load_manifest(args.data)
        config = T.TrainConfig.from_json(args.config) if args.config else T.TrainConfig()
    except (isp.DatasetError, ValueError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        config.seed = args.seed
    if args.steps is not None:
        config.steps = args.steps
    model = optimizer = None
    start = 0
    if args.resume:
        rdir = Path(args.resume)
        try:
            model = M.load(rdir / "model.ueck")
            optimizer, start = T.load_optimizer(rdir / "optimizer.ueck")
        except (M.CheckpointError, OSError) as exc:
            raise UsageError(f"cannot resume from {rdir}: {exc}") from exc
    try:
        T.train(T.ExposureDataset(seqs), config, args.out, model, optimizer, start)
    except T.NonFiniteLossError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except T.SamplingError as exc:
        raise UsageError(str(exc)) from exc
    print(f"checkpoint: {Path(args.out) / 'model.ueck'}")
    return EXIT_OK


def _load_model(path) -> M.UecModel:
    try:
        return M.load(path)
    except (M.CheckpointError, OSError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from exc


def _read(path) -> np.ndarray:
    try:
        return isp.read_image(path)
    except Exception as exc:  # noqa: BLE001 - PIL raises many types
        raise UsageError(f"cannot read image {path}: {exc}") from exc


def cmd_correct(args) -> int:
    if (args.reference is None) == (args.ref_feature is None):
        raise UsageError("give exactly one of --reference / --ref-feature")
    if args.save_ref_feature and args.reference is None:
        raise UsageError("--save-ref-feature requires --reference")
    model = _load_model(args.checkpoint)
    if args.reference is not None:
        feature = M.encode(_read(args.reference), model)
        if args.save_ref_feature:
            M.save_feature(feature, args.save_ref_feature)
    else:
        try:
            feature = M.load_feature(args.ref_feature)
        except (M.CheckpointError, OSError) as exc:
            raise UsageError(str(exc)) from exc
    out = M.apply(_read(args.input), feature, model)
    isp.write_image(args.output, out)
    print(f"wrote {args.output}")
    return EXIT_OK


def _best_reference(model, seqs, metrics) -> tuple[np.ndarray, str]:
    best = None
    for cand in seqs:
        feat = M.encode(cand.gt, model)
        score = X.evaluate(model, feat, seqs, ("psnr",)).aggregate["psnr_db"]
        if best is None or score > best[0]:
            best = (score, feat, cand.scene_id)
    log.info("sweep-best reference: %s (%.3f dB)", best[2], best[0])
    return best[1], best[2]


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = sorted(set(metrics) - set(X.METRICS))
    if unknown or not metrics:
        raise UsageError(f"unknown metric(s) {unknown}; choose from {','.join(X.METRICS)}")
    model = _load_model(args.checkpoint)
    try:
        _, seqs = isp.load_manifest(args.test_manifest)
    except isp.DatasetError as exc:
        raise UsageError(str(exc)) from exc
    if args.reference:
        feature, ref_name = M.encode(_read(args.reference), model), args.reference
    else:
        feature, ref_name = _best_reference(model, seqs, metrics)
    report = X.evaluate(model, feature, seqs, metrics)
    report.timing = {"reference": str(ref_name)}
    report.to_json(args.report)
    if args.csv:
        report.to_csv(args.csv)
    for row in report.ev_table:
        vals = " ".join(f"{k}={v:.4f}" for k, v in row.items() if k not in ("ev", "count"))
        print(f"EV {row['ev']:+.2f}: {vals}")
    print("avg: " + " ".join(f"{k}={v:.4f}" for k, v in report.aggregate.items()))
    return EXIT_OK


def cmd_bench(args) -> int:
    res = parse_resolution(args.resolution)
    if args.iters < 10:
        raise UsageError(f"--iters must be >= 10, got {args.iters}")
    model = _load_model(args.checkpoint) if args.checkpoint else M.init_model(0)
    stats = X.bench(model, res, args.iters)
    print(f"{args.resolution}: median {stats['median_ms']:.2f} ms  p95 {stats['p95_ms']:.2f} ms  "
          f"{stats['mpix_per_s']:.2f} MP/s")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    reports = G.run_suite(seeds=args.seeds)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_error)
        print(f"worst op: {worst.name} ({worst.max_rel_error:.2e})", file=sys.stderr)
        return EXIT_CHECK
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uec", description="Unsupervised exposure correction toolkit")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = fully deterministic)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render multi-exposure sequences from well-exposed images")
    s.add_argument("--input-dir", required=True)
    s.add_argument("--output-dir", required=True)
    s.add_argument("--ev-grid", default="-2,-1,0,1,2,3")
    s.add_argument("--jitter", action="store_true", help="offset non-zero EVs by U(-0.25, 0.25)")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train a model on a synthesized dataset")
    s.add_argument("--data", required=True, help="dataset directory or manifest.json")
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="directory holding model.ueck and optimizer.ueck")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int, help="override config.steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("correct", help="correct one image against a reference")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference")
    s.add_argument("--ref-feature")
    s.add_argument("--save-ref-feature")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("eval", help="score corrected frames against each scene's 0 EV frame")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--reference")
    s.add_argument("--test-manifest", required=True)
    s.add_argument("--metrics", default="psnr,ssim,edge")
    s.add_argument("--report", required=True)
    s.add_argument("--csv")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time apply() on one thread")
    s.add_argument("--checkpoint")
    s.add_argument("--resolution", default="256x256")
    s.add_argument("--iters", type=int, default=100)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--seeds", type=int, default=10)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
