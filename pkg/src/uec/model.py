"""The UEC network: exposure encoder, difference/lambda predictor, corrector.

Tensor-level functions (``*_t``) run on :class:`~uec.tensor.Tensor` and are
what training differentiates through. The array-level functions (``encode``,
``predict_delta``, ``predict_lambdas``, ``correct``, ``apply``) are the
inference API; ``correct`` uses a compiled per-pixel kernel so that every
output pixel depends only on its own input pixel.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .tensor import Tensor, affine, blend, clip01, conv2d, global_stat_pool, relu, sigmoid, sub, take

MODEL_VERSION = 1
FEATURE_DIM = 96
THUMB_SIDE = 256
LAMBDA_LO, LAMBDA_HI = -1.0, 2.0
N_STAGES = 3
HIDDEN = 8
# sigmoid(IDENTITY_LOGIT) maps lambda to exactly 1 inside (LAMBDA_LO, LAMBDA_HI)
IDENTITY_LOGIT = math.log((1 - LAMBDA_LO) / (LAMBDA_HI - 1))

_LAMBDA_MIN = np.nextafter(np.float32(LAMBDA_LO), np.float32(0))
_LAMBDA_MAX = np.nextafter(np.float32(LAMBDA_HI), np.float32(0))

CKPT_MAGIC = b"UECK"
FEAT_MAGIC = b"UECF"


def _arch() -> dict[str, tuple[int, ...]]:
    shapes = {
        "encoder.conv1.weight": (16, 3, 3, 3),
        "encoder.conv1.bias": (16,),
        "encoder.conv2.weight": (32, 16, 3, 3),
        "encoder.conv2.bias": (32,),
        "predictor.diff.weight": (32, FEATURE_DIM),
        "predictor.diff.bias": (32,),
        "predictor.head.weight": (1, 32),
        "predictor.head.bias": (1,),
        "predictor.lambda1.weight": (16, 1),
        "predictor.lambda1.bias": (16,),
        "predictor.lambda2.weight": (N_STAGES, 16),
        "predictor.lambda2.bias": (N_STAGES,),
    }
    for i in range(1, N_STAGES + 1):
        shapes[f"corrector.{i}.conv1.weight"] = (HIDDEN, 3, 1, 1)
        shapes[f"corrector.{i}.conv1.bias"] = (HIDDEN,)
        shapes[f"corrector.{i}.conv2.weight"] = (3, HIDDEN, 1, 1)
        shapes[f"corrector.{i}.conv2.bias"] = (3,)
    return shapes


ARCH = _arch()


class CheckpointError(ValueError):
    pass


@dataclass
class UecModel:
    params: dict[str, Tensor] = field(default_factory=dict)
    version: int = MODEL_VERSION

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self, dtype=None) -> "UecModel":
        return UecModel({k: Tensor(v.data.astype(dtype or v.dtype, copy=True), v.requires_grad, k)
                         for k, v in self.params.items()}, self.version)


def init_model(seed: int = 0) -> UecModel:
    """Glorot-uniform weights, zero biases, and an identity-start lambda head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in ARCH.items():
        if name.endswith(".bias"):
            arr = np.zeros(shape, np.float32)
        elif name == "predictor.lambda2.weight":
            arr = np.zeros(shape, np.float32)
        else:
            rf = int(np.prod(shape[2:])) if len(shape) == 4 else 1
            limit = math.sqrt(6.0 / (shape[1] * rf + shape[0] * rf))
            arr = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    params["predictor.lambda2.bias"].data[:] = np.float32(IDENTITY_LOGIT)
    return UecModel(params)


def param_count(model: UecModel) -> int:
    return int(sum(p.data.size for p in model.params.values()))


# ---------------------------------------------------------------- tensor path


def to_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    dtype = np.float64 if img.dtype == np.float64 else np.float32
    return np.ascontiguousarray(img.transpose(2, 0, 1), dtype=dtype)


def to_hwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(1, 2, 0))


def encode_t(model: UecModel, x: Tensor) -> Tensor:
    h = relu(conv2d(x, model["encoder.conv1.weight"], model["encoder.conv1.bias"], 2, 1))
    h = relu(conv2d(h, model["encoder.conv2.weight"], model["encoder.conv2.bias"], 2, 1))
    return global_stat_pool(h)


def delta_t(model: UecModel, e_in: Tensor, e_ref: Tensor) -> Tensor:
    h = relu(affine(sub(e_ref, e_in), model["predictor.diff.weight"], model["predictor.diff.bias"]))
    return affine(h, model["predictor.head.weight"], model["predictor.head.bias"])


def lambdas_t(model: UecModel, delta: Tensor) -> Tensor:
    h = relu(affine(delta, model["predictor.lambda1.weight"], model["predictor.lambda1.bias"]))
    z = affine(h, model["predictor.lambda2.weight"], model["predictor.lambda2.bias"])
    s = sigmoid(z)
    # affine map onto (LAMBDA_LO, LAMBDA_HI) expressed as a 1x1 affine layer
    span = Tensor(np.diag(np.full(N_STAGES, LAMBDA_HI - LAMBDA_LO)).astype(s.dtype))
    lo = Tensor(np.full(N_STAGES, LAMBDA_LO, s.dtype))
    return affine(s, span, lo)


def correct_t(model: UecModel, x: Tensor, lams: Tensor) -> Tensor:
    for i in range(1, N_STAGES + 1):
        p = f"corrector.{i}."
        h = relu(conv2d(x, model[p + "conv1.weight"], model[p + "conv1.bias"]))
        h = conv2d(h, model[p + "conv2.weight"], model[p + "conv2.bias"])
        x = clip01(blend(x, h, take(lams, i - 1)))
    return x


def forward_t(model: UecModel, x: Tensor, e_ref: Tensor) -> Tensor:
    """Correct a [3,H,W] tensor toward a reference feature, end to end."""
    lams = lambdas_t(model, delta_t(model, encode_t(model, x), e_ref))
    return correct_t(model, x, lams)


# ---------------------------------------------------------------- inference


def thumbnail(img: np.ndarray, max_side: int = THUMB_SIDE) -> np.ndarray:
    """Bilinear resize so the longest side is at most ``max_side`` (half-pixel centers)."""
    img = np.asarray(img, np.float32)
    h, w = img.shape[:2]
    if max(h, w) <= max_side:
        return img
    s = max_side / max(h, w)
    nh, nw = max(1, round(h * s)), max(1, round(w * s))

    def axis(n_out, n_in):
        src = np.clip((np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5, 0, n_in - 1)
        i0 = np.floor(src).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, (src - i0).astype(np.float32)

    y0, y1, fy = axis(nh, h)
    x0, x1, fx = axis(nw, w)
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    fy = fy[:, None, None]
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def encode(img: np.ndarray, model: UecModel) -> np.ndarray:
    """96-D exposure feature of an HxWx3 image (computed on its thumbnail)."""
    return encode_t(model, Tensor(to_chw(thumbnail(img)))).data.astype(np.float32)


def predict_delta(e_in: np.ndarray, e_ref: np.ndarray, model: UecModel) -> float:
    for e in (e_in, e_ref):
        if np.shape(e) != (FEATURE_DIM,):
            raise ValueError(f"exposure feature must have {FEATURE_DIM} components, got {np.shape(e)}")
    d = delta_t(model, Tensor(np.asarray(e_in, np.float32)), Tensor(np.asarray(e_ref, np.float32)))
    return float(d.data[0])


def predict_lambdas(delta: float, model: UecModel) -> np.ndarray:
    if not np.isfinite(delta):
        raise ValueError(f"delta must be finite, got {delta}")
    lam = lambdas_t(model, Tensor(np.array([delta], np.float32))).data.astype(np.float32)
    # a saturated sigmoid would land on the endpoints; keep the interval open
    return np.clip(lam, _LAMBDA_MIN, _LAMBDA_MAX)


@numba.njit(cache=True)
def _correct_kernel(img, lams, w1, b1, w2, b2, out):
    h, w = img.shape[0], img.shape[1]
    hid = np.empty(w1.shape[1], np.float64)
    px = np.empty(3, np.float64)
    hx = np.empty(3, np.float64)
    for y in range(h):
        for x in range(w):
            for c in range(3):
                px[c] = img[y, x, c]
            for s in range(lams.shape[0]):
                for o in range(w1.shape[1]):
                    acc = w1[s, o, 0] * px[0] + w1[s, o, 1] * px[1] + w1[s, o, 2] * px[2] + b1[s, o]
                    hid[o] = acc if acc > 0.0 else 0.0
                for c in range(3):
                    acc = 0.0
                    for o in range(w1.shape[1]):
                        acc += w2[s, c, o] * hid[o]
                    hx[c] = acc + b2[s, c]
                lam = lams[s]
                for c in range(3):
                    v = lam * px[c] + (1.0 - lam) * hx[c]
                    px[c] = min(max(v, 0.0), 1.0)
            for c in range(3):
                out[y, x, c] = px[c]


def _corrector_weights(model: UecModel):
    w1 = np.stack([model[f"corrector.{i}.conv1.weight"].data[:, :, 0, 0] for i in range(1, N_STAGES + 1)])
    b1 = np.stack([model[f"corrector.{i}.conv1.bias"].data for i in range(1, N_STAGES + 1)])
    w2 = np.stack([model[f"corrector.{i}.conv2.weight"].data[:, :, 0, 0] for i in range(1, N_STAGES + 1)])
    b2 = np.stack([model[f"corrector.{i}.conv2.bias"].data for i in range(1, N_STAGES + 1)])
    return tuple(np.ascontiguousarray(a, np.float64) for a in (w1, b1, w2, b2))


def correct(img: np.ndarray, lambdas, model: UecModel) -> np.ndarray:
    """Three blended pointwise stages, clipped to [0,1] after each one."""
    img = np.ascontiguousarray(img, np.float32)
    lams = np.asarray(lambdas, np.float64).reshape(-1)
    if lams.shape != (N_STAGES,) or not np.all(np.isfinite(lams)):
        raise ValueError(f"expected {N_STAGES} finite lambdas, got {lambdas!r}")
    out = np.empty_like(img)
    _correct_kernel(img, lams, *_corrector_weights(model), out)
    return out


def apply(img: np.ndarray, ref_feature: np.ndarray, model: UecModel) -> np.ndarray:
    """Correct ``img`` toward the exposure described by ``ref_feature``.

    Only the thumbnail reaches the encoder; the corrector runs on the
    full-resolution input.
    """
    delta = predict_delta(encode(img, model), ref_feature, model)
    return correct(img, predict_lambdas(delta, model), model)


# ---------------------------------------------------------------- serialization


def write_tensors(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, payload, offset = [], [], 0
    for name, arr in tensors.items():
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": "f32le"})
        payload.append(buf)
        offset += len(buf)
    header = {"entries": entries}
    if meta:
        header["meta"] = meta
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", MODEL_VERSION, len(hbytes)) + hbytes)
        for buf in payload:
            f.write(buf)


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError(f"truncated header in {path}")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != MODEL_VERSION:
        raise CheckpointError(f"unsupported version {version} in {path}")
    if len(raw) < 12 + hlen:
        raise CheckpointError(f"truncated header in {path}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
        entries = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"malformed header in {path}: {exc}") from exc
    body = memoryview(raw)[12 + hlen :]
    out = {}
    for e in entries:
        if e.get("dtype") != "f32le":
            raise CheckpointError(f"tensor {e.get('name')!r}: unsupported dtype {e.get('dtype')!r}")
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start, stop = e["offset"], e["offset"] + 4 * n
        if stop > len(body):
            raise CheckpointError(f"truncated payload for tensor {e['name']!r}")
        out[e["name"]] = np.frombuffer(body[start:stop], dtype="<f4").astype(np.float32).reshape(e["shape"])
    return out, header.get("meta", {})


def save(model: UecModel, path) -> None:
    write_tensors(path, {k: v.data for k, v in model.params.items()}, {"kind": "uec-model"})


def load(path) -> UecModel:
    tensors, _ = read_tensors(path)
    params = {}
    for name, shape in ARCH.items():
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"shape mismatch for tensor {name!r}: expected {shape}, got {tensors[name].shape}")
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    extra = set(tensors) - set(ARCH)
    if extra:
        raise CheckpointError(f"unexpected tensor {sorted(extra)[0]!r}")
    return UecModel(params)


def save_feature(feature: np.ndarray, path) -> None:
    feature = np.asarray(feature, "<f4")
    if feature.shape != (FEATURE_DIM,):
        raise ValueError(f"exposure feature must have {FEATURE_DIM} components")
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<I", MODEL_VERSION) + feature.tobytes())


def load_feature(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEAT_MAGIC:
        raise CheckpointError(f"bad magic in {path}: {raw[:4]!r}")
    if len(raw) < 8:
        raise CheckpointError(f"truncated feature file {path}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != MODEL_VERSION:
        raise CheckpointError(f"unsupported version {version} in {path}")
    if len(raw) != 8 + 4 * FEATURE_DIM:
        raise CheckpointError(f"truncated payload in {path}: expected {FEATURE_DIM} floats")
    return np.frombuffer(raw[8:], dtype="<f4").astype(np.float32)
