"""Desk-scale corpus and experiment used by the acceptance suite and scripts.

The corpus is cut from the color photographs bundled with scikit-image and
scikit-learn: random rescaled crops, several per photograph. Held-out scenes
come from photographs that contribute nothing to the training split.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import isp
from . import metrics as X
from . import model as M
from . import training as T

TRAIN_SOURCES = ("astronaut", "chelsea", "rocket", "motorcycle_left", "motorcycle_right", "immunohistochemistry", "flower")
HELDOUT_SOURCES = ("coffee", "china")


def source_images() -> dict[str, np.ndarray]:
    from skimage import data
    from sklearn.datasets import load_sample_images

    imgs = {name: getattr(data, name)() for name in
            ("astronaut", "chelsea", "rocket", "coffee", "immunohistochemistry")}
    left, right, _ = data.stereo_motorcycle()
    imgs["motorcycle_left"], imgs["motorcycle_right"] = left, right
    samples = load_sample_images()
    for fname, img in zip(samples.filenames, samples.images):
        imgs[Path(fname).stem] = img
    return {k: np.asarray(v[..., :3], np.uint8) for k, v in imgs.items()}


def _resize(img: np.ndarray, scale: float) -> np.ndarray:
    from PIL import Image

    h, w = img.shape[:2]
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(img).resize(size, Image.BILINEAR))


def build_corpus(out_dir, sources, per_source: int = 8, size: int = 160, seed: int = 0) -> list[Path]:
    """Write ``per_source`` random rescaled ``size``-pixel crops of each source."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgs = source_images()
    paths = []
    for si, name in enumerate(sources):
        rng = np.random.default_rng([seed, si])
        src = imgs[name]
        for k in range(per_source):
            lo = size / min(src.shape[:2])
            scaled = _resize(src, rng.uniform(max(lo, 0.35), max(lo, 1.0)))
            y = int(rng.integers(0, scaled.shape[0] - size + 1))
            x = int(rng.integers(0, scaled.shape[1] - size + 1))
            crop = scaled[y : y + size, x : x + size]
            if rng.random() < 0.5:
                crop = crop[:, ::-1]
            path = out_dir / f"{name}_{k:02d}.png"
            Image.fromarray(np.ascontiguousarray(crop)).save(path)
            paths.append(path)
    return paths


@dataclass
class DeskResult:
    train_scenes: int
    heldout_scenes: int
    steps: int
    train_seconds: float
    loss_first: dict
    loss_last: dict
    pretext_model_psnr: float
    pretext_identity_psnr: float
    pretext_by_ev: list[dict] = field(default_factory=list)
    monotone_fraction: float = 0.0
    sweep_luminance: dict = field(default_factory=dict)
    delta_sign_agreement: float = 0.0
    brightening_fraction: float = 0.0


def pretext_psnr(model: M.UecModel | None, sequences) -> list[dict]:
    """Held-out restoration PSNR for every ordered (input, reference) pair of each scene.

    ``model=None`` scores the input itself (identity baseline). Rows are
    averaged per input EV.
    """
    rows = []
    for seq in sequences:
        feats = None if model is None else [M.encode(im, model) for im in seq.images]
        for i, (ev_in, img) in enumerate(zip(seq.evs, seq.images)):
            for j, (ev_ref, ref) in enumerate(zip(seq.evs, seq.images)):
                if i == j:
                    continue
                out = img if model is None else M.apply(img, feats[j], model)
                rows.append({"input_ev": ev_in, "ref_ev": ev_ref, "psnr_db": X.psnr(out, ref)})
    evs = sorted({r["input_ev"] for r in rows})
    return [{"ev": ev, "psnr_db": float(np.mean([r["psnr_db"] for r in rows if r["input_ev"] == ev]))}
            for ev in evs]


def delta_sign_agreement(model: M.UecModel, sequences) -> float:
    """Fraction of held-out scenes whose frame-to-(+1 EV sibling) delta has the majority sign.

    Each scene contributes the sign of its 0 EV -> +1 EV prediction.
    """
    signs = []
    for seq in sequences:
        i, j = seq.evs.index(0.0), seq.evs.index(1.0)
        d = M.predict_delta(M.encode(seq.images[i], model), M.encode(seq.images[j], model), model)
        signs.append(np.sign(d))
    signs = np.array(signs)
    majority = 1.0 if np.sum(signs > 0) >= np.sum(signs < 0) else -1.0
    return float(np.mean(signs == majority))


def brightening_fraction(model: M.UecModel, sequences) -> float:
    """Fraction of scenes where the -2 EV frame gets brighter when corrected toward the 0 EV frame."""
    wins = 0
    for seq in sequences:
        low, gt = seq.images[seq.evs.index(-2.0)], seq.gt
        out = M.apply(low, M.encode(gt, model), model)
        wins += X.luminance(out) > X.luminance(low)
    return wins / len(sequences)


def run_experiment(work_dir, config: T.TrainConfig, per_source: int = 8, size: int = 160) -> tuple[DeskResult, M.UecModel]:
    work = Path(work_dir)
    build_corpus(work / "train_src", TRAIN_SOURCES, per_source, size, seed=config.seed)
    build_corpus(work / "heldout_src", HELDOUT_SOURCES, per_source, size, seed=config.seed + 1)
    isp.synth_dataset(work / "train_src", work / "train", seed=config.seed)
    isp.synth_dataset(work / "heldout_src", work / "heldout", seed=config.seed)
    _, train_seqs = isp.load_manifest(work / "train")
    _, test_seqs = isp.load_manifest(work / "heldout")

    t0 = time.perf_counter()
    result = T.train(T.ExposureDataset(train_seqs), config, work / "run")
    seconds = time.perf_counter() - t0
    model = result.model

    by_ev = pretext_psnr(model, test_seqs)
    base = pretext_psnr(None, test_seqs)
    for row, b in zip(by_ev, base):
        row["identity_psnr_db"] = b["psnr_db"]
    # the first held-out scene supplies the reference bracket
    sweep = X.ev_sweep_audit(model, test_seqs[1:], test_seqs[0])

    def window(recs):
        keys = ("l_rest", "l_mono", "l_sem", "l_total")
        return {k: float(np.mean([r[k] for r in recs])) for k in keys}

    n = max(1, min(50, len(result.log) // 10))
    res = DeskResult(
        train_scenes=len(train_seqs), heldout_scenes=len(test_seqs), steps=config.steps,
        train_seconds=seconds, loss_first=window(result.log[:n]), loss_last=window(result.log[-n:]),
        pretext_model_psnr=float(np.mean([r["psnr_db"] for r in by_ev])),
        pretext_identity_psnr=float(np.mean([r["psnr_db"] for r in base])),
        pretext_by_ev=by_ev, monotone_fraction=sweep.monotone_fraction,
        sweep_luminance={str(k): v for k, v in sweep.mean_luminance_by_ref_ev.items()},
        delta_sign_agreement=delta_sign_agreement(model, test_seqs),
        brightening_fraction=brightening_fraction(model, test_seqs),
    )
    (work / "desk_result.json").write_text(json.dumps(asdict(res), indent=2))
    return res, model
