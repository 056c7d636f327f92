"""Central finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import DiffArray, backward, no_grad, zero_grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor).

    ``floor`` keeps coordinates whose true gradient is exactly zero (a key
    bias under softmax shift invariance, say) from reporting pure roundoff as
    a relative error of one.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradient_pairs(
    f: Callable[[], DiffArray],
    params: Sequence[DiffArray],
    h: float | Sequence[float] = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Return (analytic, numeric) gradients at sampled coordinates.

    ``f`` must rebuild its graph on every call. With ``n_coords`` set, that
    many coordinates are drawn uniformly over all parameters (without
    replacement); otherwise every coordinate is checked. ``order=4`` uses the
    five-point stencil, which tolerates strongly curved losses.

    A decreasing sequence of steps picks, per coordinate, the estimate from
    the adjacent pair of steps that agree best: large steps lose to
    truncation on curved coordinates, small ones to roundoff on flat ones.
    """
    steps = [float(h)] if np.isscalar(h) else [float(v) for v in h]
    if not steps or min(steps) <= 0:
        raise ValueError("step h must be positive")
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    zero_grads(params)
    backward(f())
    grads = [np.zeros_like(p.values) if p.grad is None else p.grad.copy() for p in params]

    sizes = [p.values.size for p in params]
    total = int(np.sum(sizes))
    if n_coords is None or n_coords >= total:
        flat = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        flat = np.sort(rng.choice(total, size=n_coords, replace=False))
    offsets = np.cumsum([0] + sizes)

    analytic, numeric = [], []
    with no_grad():
        for idx in flat:
            pi = int(np.searchsorted(offsets, idx, side="right") - 1)
            j = int(idx - offsets[pi])
            vals = params[pi].values.reshape(-1)
            orig = vals[j]

            def at(step):
                vals[j] = orig + step
                return float(f().values)

            def estimate(step):
                d1 = (at(step) - at(-step)) / (2.0 * step)
                if order == 4:
                    d2 = (at(2 * step) - at(-2 * step)) / (4.0 * step)
                    d1 = (4.0 * d1 - d2) / 3.0
                return d1

            est = [estimate(step) for step in steps]
            vals[j] = orig
            if len(est) > 1:
                gaps = np.abs(np.diff(est))
                pick = est[int(np.argmin(gaps)) + 1]
            else:
                pick = est[0]
            analytic.append(grads[pi].reshape(-1)[j])
            numeric.append(pick)
    return np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)


def finite_diff_check(
    f: Callable[[], DiffArray],
    params: Sequence[DiffArray],
    h: float | Sequence[float] = 1e-4,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    order: int = 2,
    floor: float = 1e-12,
) -> float:
    """Max relative error between backprop and central differences."""
    analytic, numeric = gradient_pairs(f, params, h=h, n_coords=n_coords, rng=rng, order=order)
    if analytic.size == 0:
        return 0.0
    return float(relative_error(analytic, numeric, floor).max())
