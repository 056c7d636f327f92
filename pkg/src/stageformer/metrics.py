"""Challenge-style evaluation metrics for multi-label ECG classification.

Label sets are sequences of class indices per recording. Confusion matrices
follow the row = predicted class, column = true class convention:
``a[i, j]`` counts recordings classified as ``i`` that actually belong to ``j``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_BETA = 2.0


@dataclass
class ConfusionCounts:
    """Per-class TP/FP/FN/TN as reals (multi-label recordings carry fractional weight)."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            arr = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if np.any(arr < 0):
                raise ValueError(f"{name} counts must be nonnegative")
            setattr(self, name, arr)

    @classmethod
    def single(cls, tp=0.0, fp=0.0, fn=0.0, tn=0.0) -> "ConfusionCounts":
        return cls([tp], [fp], [fn], [tn])

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def _as_sets(label_sets, n_classes: int) -> list[frozenset]:
    out = []
    for s in label_sets:
        s = frozenset(int(i) for i in s)
        if any(i < 0 or i >= n_classes for i in s):
            raise ValueError(f"label index out of range for {n_classes} classes: {sorted(s)}")
        out.append(s)
    return out


def sets_to_multi_hot(label_sets, n_classes: int) -> np.ndarray:
    y = np.zeros((len(label_sets), n_classes))
    for r, s in enumerate(_as_sets(label_sets, n_classes)):
        y[r, sorted(s)] = 1.0
    return y


def multi_hot_to_sets(y: np.ndarray) -> list[tuple[int, ...]]:
    return [tuple(int(i) for i in np.flatnonzero(row)) for row in np.asarray(y)]


def confusion_counts(true_sets, pred_sets, n_classes: int) -> ConfusionCounts:
    """Per-class binary counts; each recording weighs 1/max(1, |true labels|)."""
    if len(true_sets) != len(pred_sets):
        raise ValueError("true and predicted label lists differ in length")
    t = _as_sets(true_sets, n_classes)
    p = _as_sets(pred_sets, n_classes)
    tp, fp, fn, tn = (np.zeros(n_classes) for _ in range(4))
    for ts, ps in zip(t, p):
        w = 1.0 / max(1, len(ts))
        for c in range(n_classes):
            if c in ts and c in ps:
                tp[c] += w
            elif c in ps:
                fp[c] += w
            elif c in ts:
                fn[c] += w
            else:
                tn[c] += w
    return ConfusionCounts(tp, fp, fn, tn)


def fbeta(counts: ConfusionCounts, beta: float = DEFAULT_BETA) -> np.ndarray | float:
    """(1+b^2) TP / ((1+b^2) TP + FP + b^2 FN); zero denominator gives 0."""
    b2 = beta * beta
    num = (1 + b2) * counts.tp
    den = num + counts.fp + b2 * counts.fn
    out = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(out[0]) if out.size == 1 else out


def gbeta(counts: ConfusionCounts, beta: float = DEFAULT_BETA) -> np.ndarray | float:
    """TP / (TP + FP + b FN); zero denominator gives 0."""
    den = counts.tp + counts.fp + beta * counts.fn
    out = np.divide(counts.tp, den, out=np.zeros_like(den), where=den > 0)
    return float(out[0]) if out.size == 1 else out


def challenge_confusion(true_sets, pred_sets, n_classes: int) -> np.ndarray:
    """a[i, j] += 1/|true U pred| for every predicted i and true j of a recording."""
    if len(true_sets) != len(pred_sets):
        raise ValueError("true and predicted label lists differ in length")
    t = _as_sets(true_sets, n_classes)
    p = _as_sets(pred_sets, n_classes)
    a = np.zeros((n_classes, n_classes))
    for ts, ps in zip(t, p):
        norm = max(1, len(ts | ps))
        for i in sorted(ps):
            for j in sorted(ts):
                a[i, j] += 1.0 / norm
    return a


def challenge_score(
    a: np.ndarray,
    weights: np.ndarray,
    true_sets=None,
    inactive_class: int | None = None,
) -> tuple[float, float]:
    """(raw, normalised) weighted score.

    Normalised = (S - S_inactive) / (S_true - S_inactive), where S_true scores
    perfect predictions and S_inactive an always-negative classifier (or one
    that always predicts ``inactive_class``) on ``true_sets``. Without
    ``true_sets`` only the raw score is meaningful and the second value is nan.
    """
    a = np.asarray(a, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if a.shape != w.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"confusion {a.shape} and weights {w.shape} must be matching square matrices")
    raw = float(np.sum(w * a))
    if true_sets is None:
        return raw, float("nan")
    n = a.shape[0]
    s_true = float(np.sum(w * challenge_confusion(true_sets, true_sets, n)))
    inactive = [() if inactive_class is None else (inactive_class,)] * len(true_sets)
    s_inactive = float(np.sum(w * challenge_confusion(true_sets, inactive, n)))
    if s_true == s_inactive:
        return raw, 0.0
    return raw, (raw - s_inactive) / (s_true - s_inactive)


def auc_binary(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Rank-statistic AUC (ties count one half); None without both classes."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)  # average ranks resolve ties
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> tuple[float, list[float | None]]:
    """Mean AUC over classes that have positives and negatives, plus per-class values."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    per = [auc_binary(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    valid = [v for v in per if v is not None]
    return (float(np.mean(valid)) if valid else float("nan")), per


def binarize(scores: np.ndarray, thresholds=0.5) -> list[tuple[int, ...]]:
    """Class i is predicted iff score_i >= threshold_i."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    th = np.broadcast_to(np.asarray(thresholds, dtype=np.float64), (scores.shape[1],))
    return multi_hot_to_sets(scores >= th)


# ----------------------------------------------------------------------- files


def read_weight_matrix(path: str | Path, class_names: Sequence[str]) -> np.ndarray:
    """CSV whose first row and column are class names matching ``class_names``."""
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    header = [h.strip() for h in rows[0][1:]]
    names = [r[0].strip() for r in rows[1:] if r]
    if header != list(class_names) or names != list(class_names):
        raise ValueError(f"weight matrix classes {header} do not match class list {list(class_names)}")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:] if r])


def write_weight_matrix(w: np.ndarray, class_names: Sequence[str], path: str | Path) -> None:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow([""] + list(class_names))
    for name, row in zip(class_names, np.asarray(w)):
        out.writerow([name] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def write_predictions(path: str | Path, ids: Sequence[str], scores: np.ndarray) -> None:
    scores = np.asarray(scores, dtype=np.float64)
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["id"] + [f"score_class_{i}" for i in range(scores.shape[1])])
    for rid, row in zip(ids, scores):
        out.writerow([rid] + [repr(float(v)) for v in row])
    Path(path).write_text(buf.getvalue())


def read_predictions(path: str | Path) -> tuple[list[str], np.ndarray]:
    rows = list(csv.reader(io.StringIO(Path(path).read_text())))
    body = [r for r in rows[1:] if r]
    return [r[0] for r in body], np.array([[float(v) for v in r[1:]] for r in body])


# ---------------------------------------------------------------------- report


@dataclass
class EvalReport:
    class_names: list[str]
    fbeta: list[float]
    gbeta: list[float]
    macro_fbeta: float
    macro_gbeta: float
    challenge_raw: float
    challenge_normalized: float
    macro_auc: float
    auc: list[float | None]
    counts: dict = field(default_factory=dict)
    n_recordings: int = 0
    beta: float = DEFAULT_BETA

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate_predictions(
    scores: np.ndarray,
    true_sets,
    class_names: Sequence[str],
    weights: np.ndarray | None = None,
    thresholds=0.5,
    beta: float = DEFAULT_BETA,
    inactive_class: int | None = None,
) -> EvalReport:
    """Score probabilities against label sets; identity weights when none given."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    n = len(class_names)
    if scores.shape != (len(true_sets), n):
        raise ValueError(f"scores {scores.shape} do not match {len(true_sets)} recordings x {n} classes")
    if len(true_sets) == 0:
        raise ValueError("cannot evaluate an empty set of recordings")
    pred_sets = binarize(scores, thresholds)
    counts = confusion_counts(true_sets, pred_sets, n)
    f = np.atleast_1d(fbeta(counts, beta))
    g = np.atleast_1d(gbeta(counts, beta))
    w = np.eye(n) if weights is None else np.asarray(weights, dtype=np.float64)
    raw, norm = challenge_score(challenge_confusion(true_sets, pred_sets, n), w, true_sets, inactive_class)
    m_auc, per_auc = macro_auc(scores, sets_to_multi_hot(true_sets, n))
    return EvalReport(
        class_names=list(class_names),
        fbeta=[float(v) for v in f],
        gbeta=[float(v) for v in g],
        macro_fbeta=float(f.mean()),
        macro_gbeta=float(g.mean()),
        challenge_raw=raw,
        challenge_normalized=norm,
        macro_auc=m_auc,
        auc=per_auc,
        counts={k: [float(v) for v in getattr(counts, k)] for k in ("tp", "fp", "fn", "tn")},
        n_recordings=len(true_sets),
        beta=beta,
    )
