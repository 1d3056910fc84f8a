"""Finite-difference gradient suites for the engine ops, the MXA branch and a small model."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import engine as E
from .attention import AttentionConfig, AttentionParams, TokenGrid, windowed_mhsa
from .distillation import LossConfig, dynamic_weights, total_loss
from .engine import GradcheckReport, Tensor, gradient_check
from .model import Model, preset
from .mxa_block import CbamParams, RoiPredictorParams, mxa_forward

OPS_TOL = 1e-4
MODEL_TOL = 1e-3
SCOPES = ("ops", "mxa", "model")


def _t(rng, *shape, away_from_zero: bool = False) -> Tensor:
    v = rng.normal(size=shape)
    if away_from_zero:
        # keep relu/max kinks outside the finite-difference stencil
        v = v + np.sign(v) * 0.1
    return Tensor(v, requires_grad=True)


def _c(v) -> Tensor:
    return Tensor(np.asarray(v, dtype=np.float64))


def _boxes(rng, b: int) -> Tensor:
    lo = rng.uniform(0.0, 0.4, size=(b, 2))
    hi = lo + rng.uniform(0.3, 0.55, size=(b, 2))
    return Tensor(np.concatenate([lo, hi], axis=1), requires_grad=True)


def op_cases(seed: int) -> list:
    """``(name, f, inputs)`` triples covering every differentiable engine op."""
    rng = np.random.default_rng(seed)
    r = lambda *s, **k: _t(rng, *s, **k)  # noqa: E731
    mask = np.where(rng.random((3, 5)) < 0.3, -1e9, 0.0)
    mask[:, 0] = 0.0

    def weighted(fn, out_shape):
        # a fixed random projection makes every output element matter to the scalar
        w = _c(rng.normal(size=out_shape))
        return lambda *a: E.mul(fn(*a), w)

    cases = [
        ("add", E.add, [r(3, 4), r(1, 4)]),
        ("sub", E.sub, [r(3, 4), r(3, 1)]),
        ("mul", E.mul, [r(2, 3, 4), r(2, 1, 4)]),
        ("scale", lambda a: E.scale(a, -1.7), [r(3, 4)]),
        ("neg", E.neg, [r(3, 4)]),
        ("sigmoid", E.sigmoid, [r(3, 4)]),
        ("relu", E.relu, [r(3, 4, away_from_zero=True)]),
        ("softplus", E.softplus, [r(3, 4)]),
        ("elementwise.mul", lambda a, b: E.elementwise("mul", a, b), [r(2, 3), r(2, 3)]),
        ("matmul", weighted(E.matmul, (2, 3, 5)), [r(2, 3, 4), r(2, 4, 5)]),
        ("matmul.shared", weighted(E.matmul, (2, 3, 5)), [r(2, 3, 4), r(4, 5)]),
        ("sum", weighted(lambda a: E.sum_(a, axis=1), (3, 2)), [r(3, 4, 2)]),
        ("mean", weighted(lambda a: E.mean(a, axis=(0, 2), keepdims=True), (1, 4, 1)), [r(3, 4, 2)]),
        ("concat", weighted(lambda a, b: E.concat([a, b], axis=1), (2, 5)), [r(2, 3), r(2, 2)]),
        ("reshape", weighted(lambda a: E.reshape(a, (4, 3)), (4, 3)), [r(3, 4)]),
        ("transpose", weighted(lambda a: E.transpose(a, (2, 0, 1)), (4, 2, 3)), [r(2, 3, 4)]),
        ("slice", weighted(lambda a: E.slice_(a, (slice(None), slice(1, 3))), (3, 2)), [r(3, 4)]),
        ("pad", weighted(lambda a: E.pad(a, ((0, 0), (1, 2))), (3, 7)), [r(3, 4)]),
        ("softmax", weighted(lambda a: E.softmax(a, axis=-1, mask=mask), (3, 5)), [r(3, 5)]),
        ("conv2d", weighted(lambda x, k: E.conv2d(x, k, stride=2, padding=1), (2, 3, 5, 5)),
         [r(2, 2, 9, 9), r(3, 2, 3, 3)]),
        ("conv2d.7x7", weighted(lambda x, k: E.conv2d(x, k, stride=1, padding=3), (1, 1, 6, 6)),
         [r(1, 2, 6, 6), r(1, 2, 7, 7)]),
    ]
    pool_shapes = {"global_avg": (2, 3, 1, 1), "global_max": (2, 3, 1, 1), "channel_avg": (2, 1, 4, 4),
                   "channel_max": (2, 1, 4, 4), "window_avg": (2, 3, 2, 2)}
    for kind, shape in pool_shapes.items():
        cases.append((f"pool.{kind}", weighted(lambda x, kind=kind: E.pool(x, kind), shape), [r(2, 3, 4, 4)]))
    cases.append(("bilinear_crop_resize", weighted(lambda x, b: E.bilinear_crop_resize(x, b, 4, 5), (2, 2, 4, 5)),
                  [r(2, 2, 6, 7), _boxes(rng, 2)]))
    return cases


def mxa_cases(seed: int) -> list:
    rng = np.random.default_rng(seed)
    c = 8
    roi = RoiPredictorParams(c, rng, dtype=np.float64)
    cbam = CbamParams(c, rng, dtype=np.float64)
    f = Tensor(rng.normal(size=(2, c, 5, 5)), requires_grad=True)
    weights = _c(rng.normal(size=(2, c, 5, 5)))

    def branch(x, *_params):
        return E.mul(mxa_forward(x, roi, cbam), weights)

    params = [*roi.parameters(), *cbam.parameters()]
    attn_cfg = AttentionConfig(c, 2, window=3)
    attn = AttentionParams(c, rng, dtype=np.float64)
    a_weights = _c(rng.normal(size=(2, 25, c)))
    x = Tensor(rng.normal(size=(2, 25, c)), requires_grad=True)

    def attention(t, *_params):
        return E.mul(windowed_mhsa(TokenGrid(t, 5, 5), attn_cfg, attn).tokens, a_weights)

    return [
        ("mxa_forward", branch, [f, *params]),
        ("windowed_mhsa", attention, [x, *attn.parameters()]),
    ]


def model_case(seed: int, max_elements: int = 1):
    """Full M5-nano-8x8 loss (BCE blended with soft distillation) against every parameter tensor."""
    rng = np.random.default_rng(seed)
    model = Model(preset("M5-nano-8x8"), seed, dtype=np.float64)
    images = rng.random((2, 1, 8, 8))
    y = (rng.random((2, 14)) < 0.4).astype(np.float64)
    p_t = rng.uniform(0.05, 0.95, size=(2, 14))
    w = dynamic_weights(p_t)
    cfg = LossConfig(alpha=0.5, temperature=2.0)
    named = model.named_parameters()

    def loss(*_params):
        return total_loss(model.forward(images), y, p_t, w, cfg)

    return list(named), loss, list(named.values()), max_elements


def run_scope(scope: str, seed: int, log: Callable[[str], None] = lambda s: None) -> list:
    """Return ``(name, GradcheckReport)`` pairs for one scope and seed."""
    if scope not in SCOPES:
        raise ValueError(f"unknown scope {scope!r}; expected one of {SCOPES}")
    results = []
    if scope == "model":
        names, f, inputs, k = model_case(seed)
        rep = gradient_check(f, inputs, tol=MODEL_TOL, names=names, max_elements=k, seed=seed)
        results.append(("model.M5-nano-8x8", rep))
    else:
        cases = op_cases(seed) if scope == "ops" else mxa_cases(seed)
        for name, f, inputs in cases:
            rep = gradient_check(f, inputs, tol=OPS_TOL, max_elements=64 if scope == "mxa" else None, seed=seed)
            results.append((name, rep))
    for name, rep in results:
        log(f"{name:<28} seed {seed}  worst rel err {rep.worst_rel_err:.2e}  {'ok' if rep.passed else 'FAIL'}")
        for msg in rep.failures:
            log(f"    {msg}")
    return results


def all_passed(results) -> bool:
    return all(rep.passed for _, rep in results)


__all__ = ["GradcheckReport", "SCOPES", "all_passed", "mxa_cases", "model_case", "op_cases", "run_scope"]
