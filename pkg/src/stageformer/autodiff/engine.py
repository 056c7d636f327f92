"""Reverse-mode automatic differentiation over dense numpy arrays.

Every operation returns a :class:`DiffArray` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:func:`backward` on a scalar orders the graph topologically (the :class:`Tape`)
and walks it in reverse exactly once per node.

Broadcasting is deliberately narrow: two operands must have equal shapes, or
the shape of one must be a trailing suffix of the other (so it is repeated
along the leading batch dimensions). Anything else needs an explicit
:func:`expand`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class InputTooShortError(ValueError):
    """A sequence is shorter than the kernel or filter applied to it."""


_node_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class DiffArray:
    """Dense array with an optional accumulated gradient."""

    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id = next(_node_counter)
        self._parents: tuple[DiffArray, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"DiffArray(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("division is only supported by a python scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_diff(x, like: DiffArray | None = None) -> DiffArray:
    if isinstance(x, DiffArray):
        return x
    dtype = like.dtype if like is not None else None
    return DiffArray(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[DiffArray, DiffArray]:
    # constants adopt the dtype of the array operand
    if isinstance(a, DiffArray):
        return a, as_diff(b, like=a)
    b = as_diff(b)
    return as_diff(a, like=b), b


def _record(values: np.ndarray, parents: Sequence[DiffArray], backward) -> DiffArray:
    out = DiffArray(values)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered view of the graph that produced ``root``.

    Built iteratively so deep graphs do not hit the recursion limit.
    """

    def __init__(self, root: DiffArray):
        order: list[DiffArray] = []
        seen: set[int] = set()
        stack: list[tuple[DiffArray, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))
        self.nodes = order

    def __len__(self) -> int:
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def backward(loss: DiffArray) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf.

    Gradients add to whatever is already stored; call :func:`zero_grads`
    between steps.
    """
    if loss.values.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any array that requires grad")
    tape = Tape(loss)
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.node_id, None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise RuntimeError(
                    f"gradient shape {pg.shape} does not match {parent.shape}"
                )
            prev = grads.get(parent.node_id)
            grads[parent.node_id] = pg if prev is None else prev + pg


def zero_grads(arrays: Iterable[DiffArray]) -> None:
    for a in arrays:
        a.grad = None


# ---------------------------------------------------------------- broadcasting


def _broadcast_shape(sa: tuple, sb: tuple, what: str = "operands") -> tuple:
    if sa == sb:
        return sa
    if len(sa) >= len(sb) and sa[len(sa) - len(sb):] == sb:
        return sa
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return sb
    raise DimensionError(f"{what} have incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.reshape((-1,) + tuple(shape)).sum(axis=0)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.values + b.values, (a, b), bw)


def sub(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.values - b.values, (a, b), bw)


def mul(a, b) -> DiffArray:
    a, b = _pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def bw(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return _record(a.values * b.values, (a, b), bw)


def scale(a: DiffArray, c: float) -> DiffArray:
    c = a.values.dtype.type(c)
    return _record(a.values * c, (a,), lambda g: (g * c,))


def tanh(a: DiffArray) -> DiffArray:
    y = np.tanh(a.values)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so nothing overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(a: DiffArray) -> DiffArray:
    y = _sigmoid(a.values)
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: DiffArray) -> DiffArray:
    mask = a.values > 0
    return _record(a.values * mask, (a,), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: DiffArray) -> DiffArray:
    """GELU in its tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    x = a.values
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (x + k * x * x * x))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _record(y, (a,), bw)


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op_kind: str, a, b=None) -> DiffArray:
    """Dispatch by name; ``scale`` takes a python scalar as ``b``."""
    if op_kind in _UNARY:
        return _UNARY[op_kind](as_diff(a))
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind == "scale":
        return scale(as_diff(a), float(b))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------- matmul


def matmul(a: DiffArray, b: DiffArray) -> DiffArray:
    """Batched matrix product; batch dims must match or one be a suffix of the other."""
    a, b = as_diff(a), as_diff(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul batch dimensions")

    if b.ndim == 2:
        k, p = b.shape
        a2 = a.values.reshape(-1, k)
        # forward runs one GEMM per batch member: a folded GEMM may round a row
        # differently depending on its position, which would break lead permutation
        out = np.matmul(a.values, b.values)

        def bw(g):
            g2 = g.reshape(-1, p)
            ga = (g2 @ b.values.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _record(out, (a, b), bw)

    out = np.matmul(a.values, b.values)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.values, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.values, -1, -2), g), b.shape)
        return ga, gb

    return _record(out, (a, b), bw)


# --------------------------------------------------------------------- conv1d


def conv_output_length(length: int, kernel: int, stride: int = 1, padding: int = 0) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def grouped_conv1d(
    x: DiffArray,
    kernels: DiffArray,
    bias: DiffArray | None = None,
    stride: int = 1,
    groups: int = 1,
    padding: int = 0,
) -> DiffArray:
    """1-D convolution (cross-correlation) with channel groups.

    ``x`` is [B, C_in, L], ``kernels`` is [C_out, C_in // groups, K] and
    ``bias`` is [C_out]. ``groups == C_in`` gives a depthwise convolution.
    """
    x, kernels = as_diff(x), as_diff(kernels)
    if x.ndim != 3 or kernels.ndim != 3:
        raise DimensionError(f"conv1d expects [B,C,L] input and [O,I,K] kernels, got {x.shape}, {kernels.shape}")
    B, C_in, L = x.shape
    C_out, C_in_g, K = kernels.shape
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError("stride and groups must be >= 1, padding >= 0")
    if C_in % groups or C_out % groups:
        raise DimensionError(f"channels ({C_in} in, {C_out} out) not divisible by groups={groups}")
    if C_in // groups != C_in_g:
        raise DimensionError(f"kernel expects {C_in_g} input channels per group, input has {C_in // groups}")
    if bias is not None and tuple(bias.shape) != (C_out,):
        raise DimensionError(f"bias shape {bias.shape} does not match {C_out} output channels")
    Lp = L + 2 * padding
    if Lp < K:
        raise InputTooShortError(f"input length {L} (padding {padding}) is shorter than kernel length {K}")
    L_out = (Lp - K) // stride + 1
    G, O_g = groups, C_out // groups

    xv = x.values
    if padding:
        xv = np.pad(xv, ((0, 0), (0, 0), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xv, K, axis=2)[:, :, ::stride][:, :, :L_out]
    # [B, G, L_out, I*K] patches against [G, I*K, O_g] filters: one batched GEMM
    cols = win.reshape(B, G, C_in_g, L_out, K).transpose(0, 1, 3, 2, 4).reshape(B, G, L_out, C_in_g * K)
    wmat = kernels.values.reshape(G, O_g, C_in_g * K).transpose(0, 2, 1)
    out = np.matmul(cols, wmat).transpose(0, 1, 3, 2).reshape(B, C_out, L_out)
    parents = (x, kernels) if bias is None else (x, kernels, bias)
    if bias is not None:
        out = out + bias.values[None, :, None]

    def bw(g):
        g4 = g.reshape(B, G, O_g, L_out)
        gx = gw = gb = None
        if kernels.requires_grad:
            gw = np.matmul(g4, cols).sum(axis=0).reshape(kernels.shape)
        if x.requires_grad:
            gcols = np.matmul(g4.transpose(0, 1, 3, 2), wmat.transpose(0, 2, 1))
            gwin = gcols.reshape(B, G, L_out, C_in_g, K).transpose(0, 1, 3, 2, 4).reshape(B, C_in, L_out, K)
            gxp = np.zeros((B, C_in, Lp), dtype=g.dtype)
            span = stride * (L_out - 1) + 1
            for k in range(K):
                gxp[:, :, k:k + span:stride] += gwin[..., k]
            gx = gxp[:, :, padding:padding + L] if padding else gxp
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _record(out, parents, bw)


# ------------------------------------------------------------- normalisations


def _sum_values(v: np.ndarray, axis, keepdims: bool, canonical: bool) -> np.ndarray:
    if not canonical:
        return np.sum(v, axis=axis, keepdims=keepdims)
    # sorted values in a contiguous last axis: the same numbers are always
    # added in the same order, whatever the input order or memory layout
    if axis is None:
        out = np.sum(np.ascontiguousarray(np.sort(v, axis=None)))
        return np.reshape(out, (1,) * v.ndim) if keepdims else out
    out = np.sum(np.ascontiguousarray(np.sort(np.moveaxis(v, axis, -1), axis=-1)), axis=-1)
    return np.expand_dims(out, axis) if keepdims else out


def softmax(x: DiffArray, canonical: bool = False) -> DiffArray:
    """Softmax over the last axis, max-shifted.

    ``canonical`` sums the normaliser in sorted order, so permuting the last
    axis permutes the output bit for bit.
    """
    x = as_diff(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    z = x.values - x.values.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / _sum_values(e, -1, True, canonical)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(y, (x,), bw)


softmax_lastdim = softmax


def layer_norm(x: DiffArray, gain: DiffArray, shift: DiffArray, eps: float = 1e-5) -> DiffArray:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    x, gain, shift = as_diff(x), as_diff(gain), as_diff(shift)
    d = x.shape[-1]
    if gain.shape != (d,) or shift.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {shift.shape} do not match last dim {d}")
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.values + shift.values

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.values
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gshift = _unbroadcast(g, shift.shape) if shift.requires_grad else None
        return gx, ggain, gshift

    return _record(out, (x, gain, shift), bw)


# ------------------------------------------------------------------ structural


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d array")
    return axis % ndim


def concat(arrays: Sequence[DiffArray], axis: int = 0) -> DiffArray:
    arrays = [as_diff(a) for a in arrays]
    if not arrays:
        raise ValueError("concat needs at least one array")
    ax = _check_axis(axis, arrays[0].ndim)
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.ndim != len(ref) or any(a.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"cannot concat shapes {ref} and {a.shape} along axis {ax}")
    sizes = [a.shape[ax] for a in arrays]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrays))
        )

    return _record(np.concatenate([a.values for a in arrays], axis=ax), arrays, bw)


def slice_axis(x: DiffArray, axis: int, start: int, stop: int) -> DiffArray:
    ax = _check_axis(axis, x.ndim)
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    return getitem(x, tuple(index))


def getitem(x: DiffArray, index) -> DiffArray:
    """Basic (slice/integer) indexing; advanced indexing is not supported."""
    parts = index if isinstance(index, tuple) else (index,)
    for p in parts:
        if not (isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None):
            raise TypeError("only basic indexing is supported")
    out = x.values[index]

    def bw(g):
        gx = np.zeros_like(x.values)
        gx[index] += g
        return (gx,)

    return _record(np.array(out, copy=True), (x,), bw)


def transpose(x: DiffArray, perm: Sequence[int]) -> DiffArray:
    perm = tuple(perm)
    if sorted(_check_axis(p, x.ndim) for p in perm) != list(range(x.ndim)):
        raise DimensionError(f"{perm} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(perm))
    return _record(np.transpose(x.values, perm), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    return _record(x.values.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def expand(x: DiffArray, shape: Sequence[int]) -> DiffArray:
    """Explicit numpy-style broadcast of size-1 / missing leading axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.values, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot expand {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    ones = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        if ones:
            g = g.sum(axis=tuple(i - lead for i in ones), keepdims=True)
        return (g,)

    return _record(np.array(out), (x,), bw)


def sum(x: DiffArray, axis: int | None = None, keepdims: bool = False, canonical: bool = False) -> DiffArray:  # noqa: A001
    """Sum over ``axis``; ``canonical`` makes the result invariant to element order."""
    if axis is not None:
        axis = _check_axis(axis, x.ndim)
    out = _sum_values(x.values, axis, keepdims, canonical)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _record(np.asarray(out), (x,), bw)


def mean(x: DiffArray, axis: int | None = None, keepdims: bool = False, canonical: bool = False) -> DiffArray:
    n = x.values.size if axis is None else x.shape[_check_axis(axis, x.ndim)]
    return scale(sum(x, axis=axis, keepdims=keepdims, canonical=canonical), 1.0 / n)


def structural(op_kind: str, *args, **kwargs) -> DiffArray:
    ops = {
        "concat": concat,
        "slice": slice_axis,
        "transpose": transpose,
        "reshape": reshape,
        "mean": mean,
        "sum": sum,
        "expand": expand,
    }
    if op_kind not in ops:
        raise ValueError(f"unknown structural op {op_kind!r}")
    return ops[op_kind](*args, **kwargs)


# ------------------------------------------------------------------------ loss


def bce_with_logits(logits: DiffArray, targets) -> DiffArray:
    """Mean binary cross-entropy over every element, log-sum-exp stable."""
    z = logits.values
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise DimensionError(f"targets shape {y.shape} does not match logits {z.shape}")
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    p = _sigmoid(z)
    return _record(np.asarray(per.mean(), dtype=z.dtype), (logits,), lambda g: (g * (p - y) / n,))
