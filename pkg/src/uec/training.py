"""Losses, batch sampling, Adam and the joint training loop.

Every step runs two branches and sums them:

* pretext pairs (input and reference from one sequence): restoration loss
  pulls the output onto the reference;
* real triples (references from another scene, two EVs): monopoly loss
  penalises the higher-EV output being darker than the lower-EV one.

The semantic (total-variation) loss is applied to every output of the step.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .isp import ExposureSequence
from .tensor import ShapeError, Tape, Tensor, _note_pattern, _record, weighted_sum

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    pass


class SamplingError(ValueError):
    pass


@dataclass
class TrainConfig:
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 0.1
    lr: float = 1e-3
    batch_pairs: int = 8
    batch_triples: int = 8
    steps: int = 20000
    crop: int = 128
    seed: int = 0
    checkpoint_every: int = 1000

    def __post_init__(self):
        if min(self.alpha1, self.alpha2, self.alpha3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.crop < 16:
            raise ValueError(f"crop must be >= 16, got {self.crop}")
        if self.batch_pairs < 1 or self.batch_triples < 1:
            raise ValueError("batch counts must be >= 1")
        if self.steps < 0 or self.checkpoint_every < 1:
            raise ValueError("steps must be >= 0 and checkpoint_every >= 1")

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))


# ---------------------------------------------------------------- losses


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def loss_restoration(out: Tensor, ref: Tensor) -> Tensor:
    """Mean squared error over all C*H*W elements."""
    _same_shape(out, ref, "loss_restoration")
    diff = out.data.astype(np.float64) - ref.data
    n = diff.size
    val = np.array([np.mean(diff * diff)], out.dtype)
    return _record(val, (out, ref), lambda g: (2 * g[0] * diff / n, -2 * g[0] * diff / n))


def loss_monopoly(out_hi: Tensor, out_lo: Tensor) -> Tensor:
    """Mean of ``max(out_lo - out_hi, 0)``; ``out_hi`` belongs to the brighter reference."""
    _same_shape(out_hi, out_lo, "loss_monopoly")
    diff = out_lo.data.astype(np.float64) - out_hi.data
    active = diff > 0
    _note_pattern(active)
    n = diff.size
    val = np.array([np.sum(diff[active]) / n], out_hi.dtype)

    def backward(g):
        gd = g[0] * active / n
        return -gd, gd

    return _record(val, (out_hi, out_lo), backward)


def loss_semantic(out: Tensor) -> Tensor:
    """Squared anisotropic total variation of a [C,H,W] tensor.

    Forward differences, zero past the last row/column, averaged over C*H*W.
    """
    if out.data.ndim != 3 or out.shape[1] * out.shape[2] < 2 or min(out.shape[1:]) < 1:
        raise ShapeError(f"loss_semantic needs a [C,H,W] image with at least 2 pixels, got {out.shape}")
    x = out.data.astype(np.float64)
    dx = np.zeros_like(x)
    dy = np.zeros_like(x)
    dx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    dy[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    n = x.size
    val = np.array([(np.sum(dx * dx) + np.sum(dy * dy)) / n], out.dtype)

    def backward(g):
        s = 2 * g[0] / n
        gx = np.zeros_like(x)
        gx[:, :, 1:] += s * dx[:, :, :-1]
        gx[:, :, :-1] -= s * dx[:, :, :-1]
        gx[:, 1:, :] += s * dy[:, :-1, :]
        gx[:, :-1, :] -= s * dy[:, :-1, :]
        return (gx,)

    return _record(val, (out,), backward)


def total_loss(l_rest: Tensor, l_mono: Tensor, l_sem: Tensor, config: TrainConfig) -> Tensor:
    return weighted_sum([l_rest, l_mono, l_sem], [config.alpha1, config.alpha2, config.alpha3])


def mean_of(terms: list[Tensor]) -> Tensor:
    return weighted_sum(terms, [1.0 / len(terms)] * len(terms))


# ---------------------------------------------------------------- sampling


@dataclass
class PretextPair:
    input: np.ndarray
    ref: np.ndarray
    scene: str
    input_ev: float
    ref_ev: float

    @property
    def target(self) -> np.ndarray:
        return self.ref


@dataclass
class RealTriple:
    input: np.ndarray
    ref_hi: np.ndarray
    ref_lo: np.ndarray
    input_scene: str
    ref_scene: str
    input_ev: float
    hi_ev: float
    lo_ev: float


class ExposureDataset:
    """In-memory multi-exposure sequences, frames kept as uint8."""

    def __init__(self, sequences: list[ExposureSequence]):
        if not sequences:
            raise SamplingError("dataset is empty")
        self.scene_ids = [s.scene_id for s in sequences]
        self.evs = [list(s.evs) for s in sequences]
        self.frames = [[np.clip(np.rint(im * 255.0), 0, 255).astype(np.uint8) for im in s.images]
                       for s in sequences]

    def __len__(self) -> int:
        return len(self.scene_ids)

    def crop(self, scene: int, frame: int, y: int, x: int, size: int) -> np.ndarray:
        arr = self.frames[scene][frame][y : y + size, x : x + size]
        return arr.astype(np.float32) / np.float32(255.0)

    def crop_origin(self, scene: int, size: int, rng: np.random.Generator) -> tuple[int, int, int]:
        h, w = self.frames[scene][0].shape[:2]
        size = min(size, h, w)
        return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1)), size


def _two_distinct(rng: np.random.Generator, n: int) -> tuple[int, int]:
    if n < 2:
        raise SamplingError("a scene needs at least two exposures")
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    return a, b + (b >= a)


def sample_step(dataset: ExposureDataset, rng: np.random.Generator, config: TrainConfig):
    """Draw one step's pretext pairs and real triples."""
    if len(dataset) < 2:
        raise SamplingError("need at least 2 scenes to draw real-task triples")
    pairs = []
    for _ in range(config.batch_pairs):
        s = int(rng.integers(len(dataset)))
        i, j = _two_distinct(rng, len(dataset.evs[s]))
        y, x, size = dataset.crop_origin(s, config.crop, rng)
        pairs.append(PretextPair(dataset.crop(s, i, y, x, size), dataset.crop(s, j, y, x, size),
                                 dataset.scene_ids[s], dataset.evs[s][i], dataset.evs[s][j]))
    triples = []
    for _ in range(config.batch_triples):
        s, t = _two_distinct(rng, len(dataset))
        i = int(rng.integers(len(dataset.evs[s])))
        a, b = _two_distinct(rng, len(dataset.evs[t]))
        hi, lo = (a, b) if dataset.evs[t][a] > dataset.evs[t][b] else (b, a)
        y, x, size = dataset.crop_origin(s, config.crop, rng)
        ry, rx, rsize = dataset.crop_origin(t, config.crop, rng)
        triples.append(RealTriple(dataset.crop(s, i, y, x, size),
                                  dataset.crop(t, hi, ry, rx, rsize), dataset.crop(t, lo, ry, rx, rsize),
                                  dataset.scene_ids[s], dataset.scene_ids[t],
                                  dataset.evs[s][i], dataset.evs[t][hi], dataset.evs[t][lo]))
    return pairs, triples


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(model: M.UecModel, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients stored on ``model``."""
    for name, p in model.params.items():
        if p.grad is None:
            raise ValueError(f"missing gradient for tensor {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name, p in model.params.items():
        g = p.grad.astype(np.float64)
        m = state.m.get(name, np.zeros(p.shape, np.float32)).astype(np.float64)
        v = state.v.get(name, np.zeros(p.shape, np.float32)).astype(np.float64)
        # moments are stored as float32 so an optimizer checkpoint resumes exactly
        m = (state.beta1 * m + (1 - state.beta1) * g).astype(np.float32)
        v = (state.beta2 * v + (1 - state.beta2) * g * g).astype(np.float32)
        state.m[name], state.v[name] = m, v
        m, v = m.astype(np.float64), v.astype(np.float64)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


def save_optimizer(state: AdamState, step: int, path) -> None:
    tensors = {f"m.{k}": v for k, v in state.m.items()}
    tensors.update({f"v.{k}": v for k, v in state.v.items()})
    M.write_tensors(path, tensors, {"kind": "adam", "t": state.t, "step": step})


def load_optimizer(path) -> tuple[AdamState, int]:
    tensors, meta = M.read_tensors(path)
    if meta.get("kind") != "adam":
        raise M.CheckpointError(f"{path} is not an optimizer checkpoint")
    state = AdamState(t=int(meta["t"]))
    for key, arr in tensors.items():
        which, name = key.split(".", 1)
        getattr(state, which)[name] = arr.astype(np.float32)
    return state, int(meta["step"])


# ---------------------------------------------------------------- training loop


@dataclass
class StepLosses:
    l_rest: Tensor
    l_mono: Tensor
    l_sem: Tensor
    l_total: Tensor


def step_losses(model: M.UecModel, pairs: list[PretextPair], triples: list[RealTriple],
                config: TrainConfig) -> StepLosses:
    """Forward one batch on the active tape and combine the three losses."""
    rest, mono, outputs = [], [], []
    for p in pairs:
        x = Tensor(M.to_chw(p.input))
        e_in = M.encode_t(model, x)
        e_ref = M.encode_t(model, Tensor(M.to_chw(p.ref)))
        out = M.correct_t(model, x, M.lambdas_t(model, M.delta_t(model, e_in, e_ref)))
        rest.append(loss_restoration(out, Tensor(M.to_chw(p.target))))
        outputs.append(out)
    for t in triples:
        x = Tensor(M.to_chw(t.input))
        e_in = M.encode_t(model, x)
        outs = []
        for ref in (t.ref_hi, t.ref_lo):
            e_ref = M.encode_t(model, Tensor(M.to_chw(ref)))
            outs.append(M.correct_t(model, x, M.lambdas_t(model, M.delta_t(model, e_in, e_ref))))
        mono.append(loss_monopoly(outs[0], outs[1]))
        outputs.extend(outs)
    l_rest, l_mono = mean_of(rest), mean_of(mono)
    l_sem = mean_of([loss_semantic(o) for o in outputs])
    return StepLosses(l_rest, l_mono, l_sem, total_loss(l_rest, l_mono, l_sem, config))


@dataclass
class TrainResult:
    model: M.UecModel
    optimizer: AdamState
    log: list[dict]


def _dump_batch(path: Path, pairs, triples) -> None:
    arrays = {}
    for i, p in enumerate(pairs):
        arrays[f"pair{i}_input"], arrays[f"pair{i}_ref"] = p.input, p.ref
    for i, t in enumerate(triples):
        arrays[f"triple{i}_input"], arrays[f"triple{i}_hi"], arrays[f"triple{i}_lo"] = t.input, t.ref_hi, t.ref_lo
    np.savez_compressed(path, **arrays)


def train(dataset: ExposureDataset, config: TrainConfig, out_dir=None, model: M.UecModel | None = None,
          optimizer: AdamState | None = None, start_step: int = 0) -> TrainResult:
    """Run ``config.steps`` optimizer steps (counting from ``start_step``).

    The batch for step ``k`` is drawn from a generator keyed on
    ``(seed, k)``, so a resumed run replays the same batches as an
    uninterrupted one.
    """
    model = model or M.init_model(config.seed)
    optimizer = optimizer or AdamState()
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.to_json(out / "config.json")
        log_file = open(out / "metrics.jsonl", "a" if start_step else "w")
    records = []
    try:
        for step in range(start_step, config.steps):
            t0 = time.perf_counter()
            rng = np.random.default_rng([config.seed, step])
            pairs, triples = sample_step(dataset, rng, config)
            model.zero_grad()
            with Tape() as tape:
                losses = step_losses(model, pairs, triples, config)
                total = losses.l_total.item()
                if not np.isfinite(total):
                    if out is not None:
                        _dump_batch(out / f"nonfinite_step{step}.npz", pairs, triples)
                    raise NonFiniteLossError(f"non-finite loss {total} at step {step}")
                tape.backward(losses.l_total)
            adam_step(model, optimizer, config.lr)
            rec = {"step": step, "l_rest": losses.l_rest.item(), "l_mono": losses.l_mono.item(),
                   "l_sem": losses.l_sem.item(), "l_total": total,
                   "wall_ms": (time.perf_counter() - t0) * 1e3}
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            if out is not None and (step + 1) % config.checkpoint_every == 0:
                M.save(model, out / f"checkpoint_step{step + 1}.ueck")
            if step % 100 == 0:
                log.info("step %d total %.5f rest %.5f mono %.5f sem %.5f", step, total,
                         rec["l_rest"], rec["l_mono"], rec["l_sem"])
    finally:
        if log_file is not None:
            log_file.close()
    if out is not None:
        M.save(model, out / "model.ueck")
        save_optimizer(optimizer, config.steps, out / "optimizer.ueck")
    return TrainResult(model, optimizer, records)
