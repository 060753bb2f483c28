"""Finite-difference suite over every differentiable op and the full network.

Each op is reduced to a scalar with fixed random weights, ``sum(out * r)``,
and checked in float64 with central differences (step 1e-3).
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import model as M
from . import tensor as tn
from . import training as T
from .tensor import GradCheckReport, Tensor, grad_check


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    """Scalar ``sum(out * r)`` recorded on the tape."""
    val = np.array([np.sum(out.data * r)])
    return tn._record(val, (out,), lambda g: (g[0] * r,))


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _case_conv3(rng):
    x, w, b = _rand(rng, 3, 5, 5), _rand(rng, 4, 3, 3, 3), _rand(rng, 4)
    r = rng.normal(size=(4, 3, 3))
    return (lambda: _weighted(tn.conv2d(x, w, b, 2, 1), r)), [x, w, b]


def _case_conv3_s1(rng):
    x, w, b = _rand(rng, 2, 4, 6), _rand(rng, 3, 2, 3, 3), _rand(rng, 3)
    r = rng.normal(size=(3, 4, 6))
    return (lambda: _weighted(tn.conv2d(x, w, b, 1, 1), r)), [x, w, b]


def _case_conv1(rng):
    x, w, b = _rand(rng, 3, 4, 4), _rand(rng, 8, 3, 1, 1), _rand(rng, 8)
    r = rng.normal(size=(8, 4, 4))
    return (lambda: _weighted(tn.conv2d(x, w, b), r)), [x, w, b]


def _case_relu(rng):
    x = _rand(rng, 30)
    r = rng.normal(size=30)
    return (lambda: _weighted(tn.relu(x), r)), [x]


def _case_sigmoid(rng):
    x = _rand(rng, 30, lo=-4, hi=4)
    r = rng.normal(size=30)
    return (lambda: _weighted(tn.sigmoid(x), r)), [x]


def _case_affine(rng):
    x, w, b = _rand(rng, 6), _rand(rng, 4, 6), _rand(rng, 4)
    r = rng.normal(size=4)
    return (lambda: _weighted(tn.affine(x, w, b), r)), [x, w, b]


def _case_pool(rng):
    x = _rand(rng, 4, 3, 5)
    r = rng.normal(size=12)
    return (lambda: _weighted(tn.global_stat_pool(x), r)), [x]


def _case_blend(rng):
    x, h, lam = _rand(rng, 3, 4, 4), _rand(rng, 3, 4, 4), _rand(rng, 1)
    r = rng.normal(size=(3, 4, 4))
    return (lambda: _weighted(tn.blend(x, h, lam), r)), [x, h, lam]


def _case_clip(rng):
    x = _rand(rng, 40, lo=-0.5, hi=1.5)
    r = rng.normal(size=40)
    return (lambda: _weighted(tn.clip01(x), r)), [x]


def _case_sub_take(rng):
    a, b = _rand(rng, 5), _rand(rng, 5)
    return (lambda: _weighted(tn.take(tn.sub(a, b), 2), np.array([1.7]))), [a, b]


def _case_weighted_sum(rng):
    ts = [_rand(rng, 1) for _ in range(3)]
    ws = list(rng.uniform(0, 2, 3))
    return (lambda: tn.weighted_sum(ts, ws)), ts


def _case_restoration(rng):
    out, ref = _rand(rng, 3, 4, 4, lo=0, hi=1), Tensor(rng.uniform(0, 1, (3, 4, 4)))
    return (lambda: T.loss_restoration(out, ref)), [out]


def _case_monopoly(rng):
    hi, lo = _rand(rng, 3, 4, 4, lo=0, hi=1), _rand(rng, 3, 4, 4, lo=0, hi=1)
    return (lambda: T.loss_monopoly(hi, lo)), [hi, lo]


def _case_semantic(rng):
    x = _rand(rng, 3, 4, 5, lo=0, hi=1)
    return (lambda: T.loss_semantic(x)), [x]


def toy_model(seed: int) -> M.UecModel:
    """Float64 model at a generic point (the lambda head is not left at zero)."""
    rng = np.random.default_rng(seed + 1000)
    model = M.init_model(seed).copy(np.float64)
    for name, p in model.params.items():
        if name.startswith("predictor.lambda2") or name.endswith(".bias"):
            p.data = p.data + rng.normal(0, 0.3, p.shape)
    return model


def _case_end_to_end(rng):
    seed = int(rng.integers(2**31))
    model = toy_model(seed)
    ims = [rng.uniform(0.15, 0.85, (8, 8, 3)) for _ in range(4)]
    pair = T.PretextPair(ims[0], ims[1], "a", -1.0, 1.0)
    triple = T.RealTriple(ims[2], ims[3], ims[1], "b", "a", 0.0, 1.0, -1.0)
    cfg = T.TrainConfig()

    def fn():
        return T.step_losses(model, [pair], [triple], cfg).l_total

    return fn, list(model.params.values())


CASES: dict[str, Callable] = {
    "conv2d_3x3_s2": _case_conv3,
    "conv2d_3x3_s1": _case_conv3_s1,
    "conv2d_1x1": _case_conv1,
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "affine": _case_affine,
    "global_stat_pool": _case_pool,
    "blend": _case_blend,
    "clip01": _case_clip,
    "sub_take": _case_sub_take,
    "weighted_sum": _case_weighted_sum,
    "loss_restoration": _case_restoration,
    "loss_monopoly": _case_monopoly,
    "loss_semantic": _case_semantic,
    "end_to_end_8x8": _case_end_to_end,
}


def check_case(name: str, seeds: int = 10, tolerance: float = 1e-3, max_coords: int = 12) -> GradCheckReport:
    """Worst result of one case over ``seeds`` random draws."""
    worst = None
    for seed in range(seeds):
        rng = np.random.default_rng([seed, len(name)])
        fn, params = CASES[name](rng)
        rep = grad_check(fn, params, tolerance=tolerance, name=name, max_coords=max_coords, rng=rng)
        if worst is None:
            worst = rep
        else:
            worst = GradCheckReport(name, max(worst.max_rel_error, rep.max_rel_error),
                                    worst.checked + rep.checked, worst.skipped + rep.skipped, tolerance)
    return worst


def run_suite(seeds: int = 10, tolerance: float = 1e-3) -> list[GradCheckReport]:
    return [check_case(name, seeds, tolerance) for name in CASES]
