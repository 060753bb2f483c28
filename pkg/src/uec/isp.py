"""Emulated-ISP exposure bracketing on sRGB images.

Each frame is rendered as ``encode(clip(decode(gt) * 2**ev, 0, 1))`` with the
piecewise sRGB transfer curve, so the only thing that varies across a
sequence is radiometry. Because every stage is monotone, frames are
pixelwise ordered by EV.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

GENERATOR_VERSION = "uec-isp/1"
DEFAULT_EV_GRID = (-2.0, -1.0, 0.0, 1.0, 2.0, 3.0)
QUANT_SLACK = 1.0 / 255.0
IMAGE_SUFFIXES = {".png", ".ppm"}


class RangeError(ValueError):
    pass


class DatasetError(ValueError):
    pass


def _check_unit(img: np.ndarray, what: str) -> None:
    lo, hi = float(np.min(img)), float(np.max(img))
    if lo < 0.0 or hi > 1.0 or not np.isfinite(lo + hi):
        raise RangeError(f"{what}: values must lie in [0,1], got [{lo}, {hi}]")


def srgb_to_linear(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float32)
    _check_unit(img, "srgb_to_linear")
    v = img.astype(np.float64)
    out = np.where(v <= 0.04045, v / 12.92, ((v + 0.055) / 1.055) ** 2.4)
    return out.astype(np.float32)


def linear_to_srgb(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, np.float32)
    _check_unit(img, "linear_to_srgb")
    v = img.astype(np.float64)
    # 0.0031308 is where the two branches meet
    out = np.where(v <= 0.0031308, v * 12.92, 1.055 * v ** (1 / 2.4) - 0.055)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def apply_ev(img: np.ndarray, ev: float) -> np.ndarray:
    """Scale linear light by ``2**ev`` and hard-clip highlights."""
    if not -5.0 <= ev <= 5.0:
        raise RangeError(f"apply_ev: ev must lie in [-5, 5], got {ev}")
    img = np.asarray(img, np.float32)
    if ev == 0:
        return img.copy()
    return np.clip(img * np.float32(2.0**ev), 0.0, 1.0).astype(np.float32)


@dataclass
class ExposureSequence:
    scene_id: str
    evs: list[float]
    images: list[np.ndarray]
    gt_index: int = field(default=-1)

    def __post_init__(self):
        if len(self.evs) != len(self.images) or not self.evs:
            raise ValueError("sequence needs one image per EV and at least one frame")
        order = np.argsort(self.evs, kind="stable")
        self.evs = [float(self.evs[i]) for i in order]
        self.images = [self.images[i] for i in order]
        shapes = {im.shape for im in self.images}
        if len(shapes) != 1:
            raise ValueError(f"frames of {self.scene_id!r} differ in shape: {shapes}")
        if self.gt_index < 0 and 0.0 in self.evs:
            self.gt_index = self.evs.index(0.0)

    @property
    def gt(self) -> np.ndarray:
        return self.images[self.gt_index]

    def __len__(self) -> int:
        return len(self.evs)


def synth_sequence(gt: np.ndarray, ev_grid=DEFAULT_EV_GRID, scene_id: str = "scene") -> ExposureSequence:
    evs = [float(e) for e in ev_grid]
    if not evs or 0.0 not in evs:
        raise ValueError("ev_grid must be non-empty and contain 0")
    gt = np.asarray(gt, np.float32)
    lin = srgb_to_linear(gt)
    seq = ExposureSequence(scene_id, evs,
                           [gt.copy() if ev == 0 else linear_to_srgb(apply_ev(lin, ev)) for ev in evs])
    # The transfer round trip can land an ulp on the wrong side of the 0 EV
    # frame (and the two curve branches miss each other by ~6e-8), so the
    # ordering is enforced outward from the ground truth.
    g = seq.gt_index
    for i in range(g + 1, len(seq)):
        seq.images[i] = np.maximum(seq.images[i], seq.images[i - 1])
    for i in range(g - 1, -1, -1):
        seq.images[i] = np.minimum(seq.images[i], seq.images[i + 1])
    return seq


@dataclass
class MonotonicityReport:
    max_violation: float
    violating_pixels: int
    slack: float

    @property
    def passed(self) -> bool:
        return self.violating_pixels == 0


def verify_monotonicity(seq: ExposureSequence, slack: float = QUANT_SLACK) -> MonotonicityReport:
    """Check that each frame is pixelwise >= its lower-EV neighbour.

    A pixel counts as violating only when it is darker by more than ``slack``.
    """
    if len(seq) < 2:
        raise ValueError("verify_monotonicity needs at least two frames")
    worst, count = 0.0, 0
    for lo, hi in zip(seq.images[:-1], seq.images[1:]):
        drop = lo.astype(np.float64) - hi.astype(np.float64)
        worst = max(worst, float(drop.max()))
        count += int(np.count_nonzero(drop > slack))
    return MonotonicityReport(max(worst, 0.0), count, slack)


# ---------------------------------------------------------------- image IO


def read_image(path) -> np.ndarray:
    """Decode an 8-bit RGB PNG or binary PPM to float32 HxWx3 in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    fmt = "PPM" if path.suffix.lower() == ".ppm" else "PNG"
    Image.fromarray(to_uint8(img), "RGB").save(path, format=fmt)


def quantize(img: np.ndarray) -> np.ndarray:
    return to_uint8(img).astype(np.float32) / np.float32(255.0)


def ev_filename(ev: float) -> str:
    return f"ev{ev:+.2f}.png"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _scene_ids(paths: list[Path]) -> list[str]:
    ids, seen = [], {}
    for p in paths:
        base = re.sub(r"[^A-Za-z0-9_.-]+", "_", p.stem) or "scene"
        n = seen.get(base, 0)
        seen[base] = n + 1
        ids.append(base if n == 0 else f"{base}_{n}")
    return ids


def synth_dataset(input_dir, output_dir, ev_grid=DEFAULT_EV_GRID, jitter: bool = False,
                  seed: int = 0) -> dict:
    """Render every decodable image in ``input_dir`` over ``ev_grid``.

    Writes ``<output_dir>/<scene_id>/ev+d.dd.png`` and ``manifest.json``.
    With ``jitter`` each non-zero EV is offset by U(-0.25, 0.25) stops, drawn
    from a generator keyed on ``(seed, scene index)``.
    """
    input_dir, output_dir = Path(input_dir), Path(output_dir)
    evs = sorted(float(e) for e in ev_grid)
    if 0.0 not in evs:
        raise ValueError("ev_grid must contain 0")
    candidates = sorted(p for p in input_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    images = []
    for p in candidates:
        try:
            images.append((p, read_image(p)))
        except Exception as exc:  # noqa: BLE001 - any decode failure skips the file
            log.warning("skipping unreadable image %s: %s", p, exc)
    if not images:
        raise DatasetError(f"no usable images in {input_dir}")

    output_dir.mkdir(parents=True, exist_ok=True)
    scenes = []
    for idx, ((src, gt), scene_id) in enumerate(zip(images, _scene_ids([p for p, _ in images]))):
        scene_evs = list(evs)
        if jitter:
            rng = np.random.default_rng([seed, idx])
            offsets = rng.uniform(-0.25, 0.25, size=len(evs))
            scene_evs = [ev if ev == 0 else round(ev + float(o), 2) for ev, o in zip(evs, offsets)]
        seq = synth_sequence(gt, scene_evs, scene_id)
        scene_dir = output_dir / scene_id
        scene_dir.mkdir(exist_ok=True)
        frames = []
        for ev, im in zip(seq.evs, seq.images):
            fpath = scene_dir / ev_filename(ev)
            write_image(fpath, im)
            frames.append({"ev": ev, "file": f"{scene_id}/{fpath.name}", "sha256": _sha256(fpath)})
        scenes.append({"scene_id": scene_id, "source": src.name, "evs": seq.evs,
                       "gt_ev": 0.0, "frames": frames})

    manifest = {"generator_version": GENERATOR_VERSION, "ev_grid": evs, "jitter": bool(jitter),
                "seed": int(seed), "scenes": scenes}
    (output_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_manifest(path) -> tuple[dict, list[ExposureSequence]]:
    """Read a manifest (file or dataset directory) and decode all frames."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text())
        root = path.parent
        seqs = []
        for scene in manifest["scenes"]:
            evs = [f["ev"] for f in scene["frames"]]
            ims = [read_image(root / f["file"]) for f in scene["frames"]]
            seqs.append(ExposureSequence(scene["scene_id"], evs, ims))
    except (KeyError, TypeError, json.JSONDecodeError, OSError) as exc:
        raise DatasetError(f"invalid manifest {path}: {exc}") from exc
    return manifest, seqs
