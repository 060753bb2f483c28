"""Image-quality metrics, edge fidelity, EV-sweep audits and timing."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as M
from .isp import ExposureSequence

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SOBEL_MAX = 4.0 * np.sqrt(2.0)


def _same_shape(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in [0,1]; zero error is capped at 99 dB."""
    _same_shape(a, b, "psnr")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = np.lib.stride_tricks.sliding_window_view(x, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def _ssim_channel(x: np.ndarray, y: np.ndarray, g: np.ndarray) -> float:
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(s.mean())


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, dynamic range 1), channel mean."""
    _same_shape(a, b, "ssim")
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_window()
    return float(np.mean([_ssim_channel(a[..., c], b[..., c], g) for c in range(a.shape[2])]))


def luminance(img: np.ndarray) -> float:
    return float(np.mean(np.asarray(img, np.float64)))


def sobel_magnitude(img: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the channel-mean image, scaled into [0,1].

    Borders use edge replication so the map keeps the source size.
    """
    img = np.asarray(img, np.float64)
    gray = img.mean(axis=2) if img.ndim == 3 else img
    p = np.pad(gray, 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return np.hypot(gx, gy) / SOBEL_MAX


def edge_map(img: np.ndarray) -> np.ndarray:
    """Binary edge mask: Sobel magnitude strictly above its median."""
    if min(np.shape(img)[:2]) < 3:
        raise ValueError("edge_map needs images of at least 3x3")
    mag = sobel_magnitude(img)
    return mag > np.median(mag)


def edge_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    _same_shape(pred, gt, "edge_f1")
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


def edge_psnr(pred_src: np.ndarray, gt_src: np.ndarray) -> float:
    _same_shape(pred_src, gt_src, "edge_psnr")
    return psnr(sobel_magnitude(pred_src), sobel_magnitude(gt_src))


# ---------------------------------------------------------------- reports

METRICS = ("psnr", "ssim", "edge")


@dataclass
class EvalReport:
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    ev_table: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2)

    def to_csv(self, path) -> None:
        cols = ["scene", "input_ev", "ref_ev", "mean_luminance", "psnr_db", "ssim", "edge_f1"]
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            for row in self.per_image:
                w.writerow({c: row.get(c, "") for c in cols})


def _score(out: np.ndarray, gt: np.ndarray, metrics) -> dict:
    row = {}
    if "psnr" in metrics:
        row["psnr_db"] = psnr(out, gt)
    if "ssim" in metrics:
        row["ssim"] = ssim(out, gt)
    if "edge" in metrics:
        row["edge_psnr_db"] = edge_psnr(out, gt)
        row["edge_f1"] = edge_f1(edge_map(out), edge_map(gt))
    return row


def evaluate(model: M.UecModel | None, ref_feature, sequences: list[ExposureSequence],
             metrics=METRICS, ref_ev: float | None = None) -> EvalReport:
    """Correct every frame of every sequence and score it against the 0 EV frame.

    ``model=None`` passes frames through unchanged (the identity baseline).
    """
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ValueError(f"unknown metric(s): {sorted(unknown)}")
    report = EvalReport()
    for seq in sequences:
        for ev, img in zip(seq.evs, seq.images):
            out = img if model is None else M.apply(img, ref_feature, model)
            row = {"scene": seq.scene_id, "input_ev": ev, "ref_ev": "" if ref_ev is None else ref_ev,
                   "mean_luminance": luminance(out)}
            row.update(_score(out, seq.gt, metrics))
            report.per_image.append(row)
    keys = [k for k in ("psnr_db", "ssim", "edge_psnr_db", "edge_f1") if k in report.per_image[0]]
    report.aggregate = {k: float(np.mean([r[k] for r in report.per_image])) for k in keys}
    for ev in sorted({r["input_ev"] for r in report.per_image}):
        rows = [r for r in report.per_image if r["input_ev"] == ev]
        entry = {"ev": ev, "count": len(rows)}
        entry.update({k: float(np.mean([r[k] for r in rows])) for k in keys})
        report.ev_table.append(entry)
    return report


@dataclass
class SweepResult:
    rows: list[dict]
    mean_luminance_by_ref_ev: dict[float, float]
    monotone_fraction: float


def ev_sweep_audit(model: M.UecModel, test_sequences: list[ExposureSequence],
                   ref_sequence: ExposureSequence) -> SweepResult:
    """Apply the model to every test frame with each reference frame.

    An input passes when its output luminance is non-decreasing in
    reference EV.
    """
    feats = [M.encode(im, model) for im in ref_sequence.images]
    rows, passed, total = [], 0, 0
    for seq in test_sequences:
        for ev, img in zip(seq.evs, seq.images):
            e_in = M.encode(img, model)
            lums = []
            for ref_ev, f in zip(ref_sequence.evs, feats):
                lam = M.predict_lambdas(M.predict_delta(e_in, f, model), model)
                lums.append(luminance(M.correct(img, lam, model)))
                rows.append({"scene": seq.scene_id, "input_ev": ev, "ref_ev": ref_ev,
                             "mean_luminance": lums[-1]})
            total += 1
            passed += bool(np.all(np.diff(lums) >= 0))
    by_ref = {ev: float(np.mean([r["mean_luminance"] for r in rows if r["ref_ev"] == ev]))
              for ev in ref_sequence.evs}
    return SweepResult(rows, by_ref, passed / total if total else 1.0)


def bench(model: M.UecModel, resolution: tuple[int, int] = (256, 256), iterations: int = 100,
          ref_feature: np.ndarray | None = None, seed: int = 0) -> dict:
    """Median and p95 wall time of ``apply`` on one thread, after 3 warmups."""
    if iterations < 10:
        raise ValueError(f"iterations must be >= 10, got {iterations}")
    h, w = resolution
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3), dtype=np.float32)
    if ref_feature is None:
        ref_feature = M.encode(rng.random((64, 64, 3), dtype=np.float32), model)
    times = []
    with threadpool_limits(1):
        for _ in range(3):
            M.apply(img, ref_feature, model)
        for _ in range(iterations):
            t0 = time.perf_counter()
            M.apply(img, ref_feature, model)
            times.append((time.perf_counter() - t0) * 1e3)
    med = float(np.median(times))
    return {"resolution": [h, w], "iterations": iterations, "median_ms": med,
            "p95_ms": float(np.percentile(times, 95)), "mpix_per_s": h * w / 1e6 / (med / 1e3)}
