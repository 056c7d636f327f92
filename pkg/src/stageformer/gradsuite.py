"""Finite-difference gradient suite over every engine primitive and the model.

Each primitive case draws random inputs, reduces the output with a random
projection (so no coordinate has a structurally zero gradient) and compares
backprop against central differences. The float32 mode compares float32
backprop against float64 central differences. Numeric derivatives use the
five-point stencil.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray
from .autodiff.gradcheck import gradient_pairs, relative_error

PRIMITIVE_TOL = {np.float64: 1e-5, np.float32: 1e-2}
MODEL_TOL = 1e-4
MAX_COORDS = 24
STEP = 3e-4
# LayerNorm on the small CLS init is strongly curved, so steps are chosen per coordinate
MODEL_STEPS = (3e-4, 1e-4, 3e-5)
# gradients below these magnitudes count as zero; the loss is O(1)
PRIMITIVE_FLOOR = {np.float64: 1e-9, np.float32: 1e-5}
MODEL_FLOOR = 1e-7


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name:<24} n={self.instances:<3d} max_rel_err={self.max_rel_error:.3e} "
                f"tol={self.tolerance:.0e} ({self.seconds:.2f}s)")


def _away_from_zero(x, margin=0.05):
    return x + np.sign(x) * margin


def _r(rng, *shape):
    return rng.standard_normal(shape)


# each maker returns (inputs, fn) where fn maps DiffArrays to a DiffArray
def _binary(op):
    def make(rng):
        shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
        b_shape = shape[rng.integers(0, len(shape)):] if rng.random() < 0.5 else shape
        return [_r(rng, *shape), _r(rng, *b_shape)], lambda a, b: op(a, b)
    return make


def _unary(op, margin=0.0):
    def make(rng):
        x = _r(rng, *rng.integers(1, 6, size=2))
        if margin:
            x = _away_from_zero(x, margin)
        return [x], lambda a: op(a)
    return make


def _make_scale(rng):
    c = float(rng.normal())
    return [_r(rng, 3, 4)], lambda a: ad.scale(a, c)


def _make_matmul(rng):
    m, k, p = rng.integers(1, 6, size=3)
    if rng.random() < 0.5:
        return [_r(rng, m, k), _r(rng, k, p)], ad.matmul
    b = int(rng.integers(1, 4))
    if rng.random() < 0.5:
        return [_r(rng, b, m, k), _r(rng, b, k, p)], ad.matmul
    return [_r(rng, b, 2, m, k), _r(rng, 2, k, p)], ad.matmul


def _make_conv(rng):
    groups = int(rng.integers(1, 4))
    cin_g, cout_g = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    K, stride, pad = int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(0, 2))
    L = int(K + rng.integers(0, 8))
    x = _r(rng, 2, groups * cin_g, L)
    w = _r(rng, groups * cout_g, cin_g, K)
    b = _r(rng, groups * cout_g)
    return [x, w, b], lambda x, w, b: ad.grouped_conv1d(x, w, b, stride=stride, groups=groups, padding=pad)


def _make_softmax(rng):
    canonical = bool(rng.random() < 0.5)
    return [_r(rng, *rng.integers(1, 6, size=2)) * 2.0], lambda a: ad.softmax(a, canonical=canonical)


def _make_layer_norm(rng):
    # width 2 normalises to +-1 whatever the input, leaving only roundoff to compare
    d = int(rng.integers(3, 9))
    return [_r(rng, int(rng.integers(1, 4)), d), 1.0 + 0.3 * _r(rng, d), _r(rng, d)], ad.layer_norm


def _make_concat(rng):
    axis = int(rng.integers(0, 2))
    s1, s2 = [3, 4], [3, 4]
    s2[axis] = int(rng.integers(1, 4))
    return [_r(rng, *s1), _r(rng, *s2)], lambda a, b: ad.concat([a, b], axis=axis)


def _make_slice(rng):
    n = int(rng.integers(2, 7))
    lo = int(rng.integers(0, n - 1))
    hi = int(rng.integers(lo + 1, n + 1))
    return [_r(rng, 3, n)], lambda a: ad.slice_axis(a, 1, lo, hi)


def _make_transpose(rng):
    perm = tuple(rng.permutation(3))
    return [_r(rng, 2, 3, 4)], lambda a: ad.transpose(a, perm)


def _make_reshape(rng):
    return [_r(rng, 2, 3, 4)], lambda a: ad.reshape(a, (4, 6))


def _make_reduce(op):
    def make(rng):
        axis = int(rng.integers(-1, 3))
        canonical = bool(rng.random() < 0.5)
        return [_r(rng, 2, 3, 4)], lambda a: op(a, axis=None if axis == -1 else axis, canonical=canonical)
    return make


def _make_expand(rng):
    return [_r(rng, 1, 3)], lambda a: ad.expand(a, (4, 2, 3))


def _make_bce(rng):
    y = (rng.random((4, 3)) < 0.5).astype(float)
    return [2.0 * _r(rng, 4, 3)], lambda z: ad.bce_with_logits(z, y)


PRIMITIVES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _make_scale,
    "tanh": _unary(ad.tanh),
    "sigmoid": _unary(ad.sigmoid),
    "relu": _unary(ad.relu, margin=0.05),
    "gelu": _unary(ad.gelu),
    "matmul": _make_matmul,
    "grouped_conv1d": _make_conv,
    "softmax_lastdim": _make_softmax,
    "layer_norm": _make_layer_norm,
    "concat": _make_concat,
    "slice": _make_slice,
    "transpose": _make_transpose,
    "reshape": _make_reshape,
    "sum": _make_reduce(ad.sum),
    "mean": _make_reduce(ad.mean),
    "expand": _make_expand,
    "bce_with_logits": _make_bce,
}


def _projected_loss(fn, arrays, proj):
    out = fn(*arrays)
    if out.values.size == 1:
        return ad.reshape(out, ()) if out.ndim else out
    return ad.sum(ad.mul(out, DiffArray(proj.astype(out.dtype))))


def check_primitive(name: str, rng: np.random.Generator, dtype=np.float64, h: float = STEP) -> float:
    """Max relative error for one random instance of primitive ``name``."""
    inputs, fn = PRIMITIVES[name](rng)
    with ad.no_grad():
        out_shape = fn(*[DiffArray(x) for x in inputs]).shape
    proj = rng.standard_normal(out_shape)
    p64 = [DiffArray(x.astype(np.float64), requires_grad=True) for x in inputs]
    total = sum(x.size for x in inputs)
    n_coords = None if total <= MAX_COORDS else MAX_COORDS
    coord_seed = int(rng.integers(2**31))
    analytic, numeric = gradient_pairs(
        lambda: _projected_loss(fn, p64, proj), p64, h=h, n_coords=n_coords,
        rng=np.random.default_rng(coord_seed), order=4,
    )
    if np.dtype(dtype) != np.float64:
        p32 = [DiffArray(x.astype(dtype), requires_grad=True) for x in inputs]
        analytic, _ = gradient_pairs(
            lambda: _projected_loss(fn, p32, proj), p32, h=h, n_coords=n_coords,
            rng=np.random.default_rng(coord_seed),
        )
    return float(relative_error(analytic, numeric, PRIMITIVE_FLOOR[np.dtype(dtype).type]).max()) if analytic.size else 0.0


def tiny_model_case(rng: np.random.Generator, variant: str = "ours", dtype: str = "float64"):
    """(params, loss closure) for a very small model on random data."""
    from .model import ModelConfig, forward, init_params

    cfg = ModelConfig(
        n_classes=2,
        input_length=64,
        encoder=dict(leads=2, kernels=(5, 3, 3, 3), strides=(2, 2, 2, 1), multipliers=(2, 2, 2, 2)),
        stages=dict(dim=8, heads=2, layers_per_stage=(1, 1, 1), mlp_ratio=2),
        dtype=dtype,
    ).variant(variant)
    params = init_params(cfg, int(rng.integers(2**31)))
    x = rng.standard_normal((2, 2, 64))
    y = (rng.random((2, 2)) < 0.5).astype(float)

    def f():
        return ad.bce_with_logits(forward(params, x, cfg).logits, y)

    return params, f


def check_model(rng: np.random.Generator, variant: str = "ours", n_coords: int = 20, h=MODEL_STEPS) -> float:
    params, f = tiny_model_case(rng, variant)
    plist = list(params.values())
    analytic, numeric = gradient_pairs(f, plist, h=h, n_coords=n_coords, rng=rng, order=4)
    return float(relative_error(analytic, numeric, MODEL_FLOOR).max())


def run_gradient_suite(
    n_instances: int = 50,
    seed: int = 0,
    dtype=np.float64,
    model_instances: int | None = None,
    primitives=None,
) -> list[CheckResult]:
    """One :class:`CheckResult` per primitive, plus the end-to-end model check in float64."""
    dtype = np.dtype(dtype).type
    tol = PRIMITIVE_TOL[dtype]
    results = []
    for k, name in enumerate(primitives or PRIMITIVES):
        rng = np.random.default_rng([seed, k])
        t0 = time.perf_counter()
        err = max(check_primitive(name, rng, dtype) for _ in range(n_instances))
        results.append(CheckResult(name, n_instances, err, tol, time.perf_counter() - t0))
    n_model = n_instances if model_instances is None else model_instances
    if dtype is np.float64 and n_model > 0:
        variants = ["ours", "ours-diff", "ours-no-attn-gated", "ours-no-attn-gated-diff"]
        rng = np.random.default_rng([seed, 1000])
        t0 = time.perf_counter()
        err = max(check_model(rng, variants[i % 4]) for i in range(n_model))
        results.append(CheckResult("model_end_to_end", n_model, err, MODEL_TOL, time.perf_counter() - t0))
    return results
