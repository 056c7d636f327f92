"""Classification heads over the per-lead CLS matrix x of shape [B, C, S].

``gated``: tanh/sigmoid gated scores per lead, projected to one score per
class, softmaxed over leads, then a per-class weighted lead average scored by
that class's own linear classifier. ``pooled``: lead mean and one affine map.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray


def init_gated_head(width: int, n_classes: int, rng, dtype=np.float64, leads: int | None = None) -> dict[str, DiffArray]:
    """Gated-head parameters; ``leads`` given -> separate query/key affines per lead."""

    def P(a):
        return DiffArray(np.asarray(a, dtype=dtype), requires_grad=True)

    std = 1.0 / math.sqrt(width)
    lead_shape = () if leads is None else (leads,)
    p = {
        "head.wq": P(rng.normal(0.0, std, lead_shape + (width, width))),
        "head.bq": P(np.zeros(lead_shape + (1,) * bool(leads) + (width,))),
        "head.wk": P(rng.normal(0.0, std, lead_shape + (width, width))),
        "head.bk": P(np.zeros(lead_shape + (1,) * bool(leads) + (width,))),
        "head.proj_w": P(rng.normal(0.0, std, (width, n_classes))),
        "head.proj_b": P(np.zeros(n_classes)),
        "head.cls_w": P(rng.normal(0.0, std, (n_classes, width))),
        "head.cls_b": P(np.zeros(n_classes)),
    }
    return p


def init_pooled_head(width: int, n_classes: int, rng, dtype=np.float64) -> dict[str, DiffArray]:
    w = rng.normal(0.0, 1.0 / math.sqrt(width), (width, n_classes)).astype(dtype)
    return {
        "head.pool_w": DiffArray(w, requires_grad=True),
        "head.pool_b": DiffArray(np.zeros(n_classes, dtype=dtype), requires_grad=True),
    }


def _lead_rows(x: DiffArray, w: DiffArray) -> DiffArray:
    """x [B, C, S] @ w with every lead its own batch member, so results do not
    depend on lead position; w is [S, K] or per lead [C, S, K]."""
    B, C, S = x.shape
    out = ad.matmul(ad.reshape(x, (B, C, 1, S)), w)
    return ad.reshape(out, (B, C, w.shape[-1]))


def _lead_affine(x: DiffArray, w: DiffArray, b: DiffArray) -> DiffArray:
    if w.ndim == 2:
        return ad.add(_lead_rows(x, w), b)
    B, C, S = x.shape
    out = ad.add(ad.matmul(ad.reshape(x, (B, C, 1, S)), w), b)
    return ad.reshape(out, (B, C, S))


def gated_attention(x: DiffArray, params: dict) -> DiffArray:
    """a = tanh(x Wq + bq) * sigmoid(x Wk + bk), elementwise, shape [B, C, S]."""
    q = ad.tanh(_lead_affine(x, params["head.wq"], params["head.bq"]))
    k = ad.sigmoid(_lead_affine(x, params["head.wk"], params["head.bk"]))
    return ad.mul(q, k)


def gated_logits(x: DiffArray, a: DiffArray, params: dict) -> tuple[DiffArray, DiffArray]:
    """Return (logits [B, N], lead weights [B, N, C]); weights sum to 1 over leads."""
    scores = ad.add(_lead_rows(a, params["head.proj_w"]), params["head.proj_b"])  # [B, C, N]
    # lead reductions use order-independent sums so lead permutation is exact
    weights = ad.softmax(ad.transpose(scores, (0, 2, 1)), canonical=True)  # [B, N, C]
    B, N, C = weights.shape
    S = x.shape[-1]
    wx = ad.mul(ad.expand(ad.reshape(weights, (B, N, C, 1)), (B, N, C, S)),
                ad.expand(ad.reshape(x, (B, 1, C, S)), (B, N, C, S)))
    v = ad.sum(wx, axis=2, canonical=True)  # [B, N, S]
    logits = ad.add(ad.sum(ad.mul(v, params["head.cls_w"]), axis=-1), params["head.cls_b"])
    return logits, weights


def gated_head(x: DiffArray, params: dict) -> tuple[DiffArray, DiffArray]:
    return gated_logits(x, gated_attention(x, params), params)


def pooled_head(x: DiffArray, params: dict) -> DiffArray:
    pooled = ad.mean(x, axis=1, canonical=True)
    return ad.add(ad.matmul(pooled, params["head.pool_w"]), params["head.pool_b"])


@dataclass
class LeadAttribution:
    """Per-class distribution over leads (rows sum to one)."""

    weights: np.ndarray  # [N, C]
    class_names: list[str]
    lead_names: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class"] + list(self.lead_names))
        for name, row in zip(self.class_names, self.weights):
            w.writerow([name] + [repr(float(v)) for v in row])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "LeadAttribution":
        rows = list(csv.reader(io.StringIO(text)))
        leads = rows[0][1:]
        names = [r[0] for r in rows[1:]]
        weights = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
        return cls(weights, names, leads)

    @classmethod
    def load(cls, path: str | Path) -> "LeadAttribution":
        return cls.from_csv(Path(path).read_text())


def lead_attribution(
    weights: DiffArray | np.ndarray,
    class_names: Sequence[str] | None = None,
    lead_names: Sequence[str] | None = None,
    sample: int = 0,
) -> LeadAttribution:
    """Label one sample's [N, C] lead weights for export."""
    w = weights.values if isinstance(weights, DiffArray) else np.asarray(weights)
    if w.ndim == 3:
        w = w[sample]
    n, c = w.shape
    class_names = list(class_names) if class_names is not None else [f"class{i}" for i in range(n)]
    lead_names = list(lead_names) if lead_names is not None else [f"lead{j}" for j in range(c)]
    return LeadAttribution(np.array(w, dtype=np.float64), class_names, lead_names)
