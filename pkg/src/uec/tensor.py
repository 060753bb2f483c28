"""Dense tensors with a reverse-mode tape, sized for the UEC network.

Only the handful of ops the network needs are provided. Shapes must match
exactly; the only broadcast is the bias add inside ``conv2d`` and ``affine``.

Recording happens only inside an active :class:`Tape` context and only when
some input requires a gradient, so inference outside a tape is a plain
numpy computation.

    >>> w = Tensor(np.ones((1, 2), np.float32), requires_grad=True)
    >>> with Tape() as tape:
    ...     y = affine(Tensor(np.array([1.0, 2.0], np.float32)), w,
    ...                Tensor(np.zeros(1, np.float32)))
    ...     tape.backward(y)
    >>> w.grad
    array([[1., 2.]], dtype=float32)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

STD_EPS = 1e-8


class ShapeError(ValueError):
    """Raised when operand shapes disagree; the message names the dimension."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of executed ops.

    ``patterns`` collects the branch decisions of piecewise ops (ReLU masks,
    clip masks, argmax indices) so finite-difference checks can tell when a
    perturbation crossed a kink.
    """

    nodes: list[_Node] = field(default_factory=list)
    patterns: list[np.ndarray] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward) -> None:
        self.nodes.append(_Node(out, tuple(inputs), backward))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                gi = gi.astype(inp.data.dtype, copy=False)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward)
    return out


def _note_pattern(pattern: np.ndarray) -> None:
    tape = _active_tape()
    if tape is not None:
        tape.patterns.append(pattern)


def _expect(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------- convolution


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    c = xp.shape[0]
    if k == 1:
        return xp[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride].reshape(c, oh * ow)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, : stride * (oh - 1) + 1 : stride, : stride * (ow - 1) + 1 : stride]
    # (C, oh, ow, k, k) -> (C, k, k, oh, ow) to match the kernel's flattening
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, oh * ow)


def _conv2d_backward(g, x, w, stride, padding, cols, need_x=True):
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    oh, ow = g.shape[1:]
    g2 = g.reshape(cout, oh * ow).astype(np.float64)
    gw = (g2 @ cols.T).reshape(w.shape)
    gb = g2.sum(axis=1)
    if not need_x:
        return None, gw, gb
    gcols = w.reshape(cout, -1).astype(np.float64).T @ g2
    if k == 1 and stride == 1:
        return gcols.reshape(x.shape), gw, gb
    gcols = gcols.reshape(cin, k, k, oh, ow)
    gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), np.float64)
    for i in range(k):
        for j in range(k):
            gxp[:, i : i + stride * oh : stride, j : j + stride * ow : stride] += gcols[:, i, j]
    gx = gxp[:, padding : padding + h, padding : padding + wd]
    return gx, gw, gb


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a [C_in,H,W] input with a [C_out,C_in,k,k] kernel."""
    _expect(x.data.ndim == 3, f"conv2d input must be [C,H,W], got {x.shape}")
    _expect(w.data.ndim == 4, f"conv2d kernel must be [C_out,C_in,k,k], got {w.shape}")
    cout, cin, k, k2 = w.shape
    _expect(k == k2, f"conv2d kernel must be square, got {k}x{k2}")
    _expect(k in (1, 3), f"conv2d kernel size must be 1 or 3, got {k}")
    _expect(stride in (1, 2), f"conv2d stride must be 1 or 2, got {stride}")
    _expect(padding in (0, k // 2), f"conv2d padding must be 0 or {k // 2}, got {padding}")
    _expect(x.shape[0] == cin, f"conv2d channel mismatch: input C_in={x.shape[0]}, kernel C_in={cin}")
    _expect(b.shape == (cout,), f"conv2d bias must be [{cout}] (C_out), got {b.shape}")
    _, h, wd = x.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    _expect(oh >= 1, f"conv2d output height H'={oh} < 1 for H={h}")
    _expect(ow >= 1, f"conv2d output width W'={ow} < 1 for W={wd}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp.astype(np.float64), k, stride, oh, ow)
    out = w.data.reshape(cout, -1).astype(np.float64) @ cols + b.data.astype(np.float64)[:, None]
    out = out.reshape(cout, oh, ow).astype(np.result_type(x.dtype, w.dtype))

    need_x = x.requires_grad

    def backward(g):
        return _conv2d_backward(g, x.data, w.data, stride, padding, cols, need_x)

    return _record(out, (x, w, b), backward)


# ---------------------------------------------------------------- elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note_pattern(mask)
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form is overflow-free for large |x|
    y = (0.5 * (1.0 + np.tanh(0.5 * x.data.astype(np.float64)))).astype(x.dtype)
    return _record(y, (x,), lambda g: (g * y * (1 - y),))


def clip01(x: Tensor) -> Tensor:
    inside = (x.data >= 0) & (x.data <= 1)
    _note_pattern(inside)
    return _record(np.clip(x.data, 0, 1), (x,), lambda g: (g * inside,))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``w @ x + b`` for a vector ``x``."""
    _expect(x.data.ndim == 1, f"affine input must be a vector, got {x.shape}")
    _expect(w.data.ndim == 2, f"affine weight must be [M,N], got {w.shape}")
    m, n = w.shape
    _expect(x.shape[0] == n, f"affine N mismatch: input N={x.shape[0]}, weight N={n}")
    _expect(b.shape == (m,), f"affine bias must be [{m}] (M), got {b.shape}")
    x64, w64 = x.data.astype(np.float64), w.data.astype(np.float64)
    out = (w64 @ x64 + b.data).astype(np.result_type(x.dtype, w.dtype))

    def backward(g):
        g64 = g.astype(np.float64)
        return w64.T @ g64, np.outer(g64, x64), g64

    return _record(out, (x, w, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _expect(a.shape == b.shape, f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def take(x: Tensor, i: int) -> Tensor:
    """Element ``i`` of a vector as a one-element tensor."""
    n = x.shape[0]

    def backward(g):
        gx = np.zeros(n, np.float64)
        gx[i] = g[0]
        return (gx,)

    return _record(x.data[i : i + 1].copy(), (x,), backward)


def blend(x: Tensor, hx: Tensor, lam: Tensor) -> Tensor:
    """``lam * x + (1 - lam) * hx`` with a one-element ``lam``."""
    _expect(x.shape == hx.shape, f"blend shape mismatch: {x.shape} vs {hx.shape}")
    _expect(lam.shape == (1,), f"blend lambda must have shape (1,), got {lam.shape}")
    lv = lam.data[0]
    out = lv * x.data + (1 - lv) * hx.data

    def backward(g):
        glam = np.array([np.sum(g.astype(np.float64) * (x.data.astype(np.float64) - hx.data))])
        return g * lv, g * (1 - lv), glam

    return _record(out.astype(np.result_type(x.dtype, hx.dtype, lam.dtype)), (x, hx, lam), backward)


def weighted_sum(terms: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Scalar ``sum_i weights[i] * terms[i]`` over one-element tensors."""
    _expect(len(terms) == len(weights), "weighted_sum needs one weight per term")
    for t in terms:
        _expect(t.data.size == 1, f"weighted_sum terms must be scalars, got {t.shape}")
    dtype = terms[0].dtype if terms else np.float32
    total = sum(float(wt) * float(t.data.reshape(-1)[0]) for t, wt in zip(terms, weights))
    out = np.array([total], dtype=dtype)

    def backward(g):
        return tuple(np.full(t.shape, g[0] * wt, np.float64) for t, wt in zip(terms, weights))

    return _record(out, tuple(terms), backward)


# ---------------------------------------------------------------- pooling


def global_stat_pool(x: Tensor, eps: float = STD_EPS) -> Tensor:
    """Per-channel (max, mean, std) of a [C,H,W] tensor, laid out as
    ``[max_1..max_C, mean_1..mean_C, std_1..std_C]``.

    The max gradient goes to the first maximal element in row-major order.
    """
    _expect(x.data.ndim == 3, f"global_stat_pool input must be [C,H,W], got {x.shape}")
    c = x.shape[0]
    flat = x.data.reshape(c, -1).astype(np.float64)
    n = flat.shape[1]
    _expect(n >= 1, "global_stat_pool needs H*W >= 1")
    idx = np.argmax(flat, axis=1)
    _note_pattern(idx)
    mx = flat[np.arange(c), idx]
    mean = flat.mean(axis=1)
    centered = flat - mean[:, None]
    std = np.sqrt((centered**2).mean(axis=1) + eps)
    out = np.concatenate([mx, mean, std]).astype(x.dtype)

    def backward(g):
        g = g.astype(np.float64)
        gmax, gmean, gstd = g[:c], g[c : 2 * c], g[2 * c :]
        gx = np.repeat((gmean / n)[:, None], n, axis=1)
        gx += centered * (gstd / (n * std))[:, None]
        gx[np.arange(c), idx] += gmax
        return (gx.reshape(x.shape),)

    return _record(out, (x,), backward)


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} {self.name}: max rel err {self.max_rel_error:.2e} "
                f"(tol {self.tolerance:.0e}, {self.checked} checked, {self.skipped} skipped at kinks)")


def _same_patterns(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-3,
    name: str = "op",
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    For each parameter tensor the error is ``max|a - n| / max(|a|, |n|)``,
    the maxima taken over the checked coordinates, so components far below
    the tensor's gradient scale are judged against that scale rather than
    their own (where truncation error of the difference quotient dominates).
    Coordinates whose perturbation flips any piecewise branch are skipped.
    ``max_coords`` subsamples coordinates per parameter for large tensors.
    """
    for p in params:
        p.requires_grad = True
        p.zero_grad()
    with Tape() as tape:
        loss = fn()
        tape.backward(loss)
    base = tape.patterns
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    def evaluate() -> tuple[float, list[np.ndarray]]:
        with Tape() as t:
            val = float(np.asarray(fn().data, np.float64).reshape(-1)[0])
        return val, t.patterns

    worst, checked, skipped = 0.0, 0, 0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        a_vals, n_vals = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            lp, pp = evaluate()
            flat[i] = orig - step
            lm, pm = evaluate()
            flat[i] = orig
            if not (_same_patterns(pp, base) and _same_patterns(pm, base)):
                skipped += 1
                continue
            a_vals.append(ga.reshape(-1)[i])
            n_vals.append((lp - lm) / (2 * step))
        if not a_vals:
            continue
        a, n = np.array(a_vals), np.array(n_vals)
        scale = max(np.abs(a).max(), np.abs(n).max())
        err = np.abs(a - n).max()
        worst = max(worst, err / scale if scale > 0 else 0.0)
        checked += len(a_vals)
    for p in params:
        p.zero_grad()
    return GradCheckReport(name, worst, checked, skipped, tolerance)
