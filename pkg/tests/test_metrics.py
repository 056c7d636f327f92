import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stageformer.metrics import (
    ConfusionCounts,
    EvalReport,
    auc_binary,
    binarize,
    challenge_confusion,
    challenge_score,
    confusion_counts,
    evaluate_predictions,
    fbeta,
    gbeta,
    macro_auc,
    read_predictions,
    read_weight_matrix,
    write_predictions,
    write_weight_matrix,
)

C = ConfusionCounts.single


# ---------------------------------------------------------------- oracles


def oracle_confusion(true_sets, pred_sets, n):
    """Multi-hot outer products scaled by the union size."""
    a = np.zeros((n, n))
    for t, p in zip(true_sets, pred_sets):
        tv, pv = np.zeros(n), np.zeros(n)
        tv[list(t)] = 1
        pv[list(p)] = 1
        union = np.count_nonzero(tv + pv)
        if union:
            a += np.outer(pv, tv) / union
    return a


def oracle_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def oracle_counts(true_sets, pred_sets, n):
    tp, fp, fn = [0.0] * n, [0.0] * n, [0.0] * n
    for t, p in zip(true_sets, pred_sets):
        w = 1.0 / max(1, len(t))
        for c in range(n):
            tp[c] += w * (c in t and c in p)
            fp[c] += w * (c not in t and c in p)
            fn[c] += w * (c in t and c not in p)
    return tp, fp, fn


def random_sets(rng, n_rec, n):
    return [tuple(np.flatnonzero(rng.random(n) < 0.4)) for _ in range(n_rec)]


# ---------------------------------------------------------------- F / G


@pytest.mark.parametrize("counts, f, g", [
    ((1, 0, 0), 1.0, 1.0),
    ((2, 1, 1), 10 / 15, 2 / 5),
    ((0, 0, 0), 0.0, 0.0),
])
def test_fbeta_gbeta_examples(counts, f, g):
    tp, fp, fn = counts
    assert fbeta(C(tp, fp, fn)) == pytest.approx(f, abs=1e-12)
    assert gbeta(C(tp, fp, fn)) == pytest.approx(g, abs=1e-12)


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50))
def test_f1_is_harmonic_mean(tp, fp, fn):
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    assert fbeta(C(tp, fp, fn), beta=1.0) == pytest.approx(f1, abs=1e-9)


@given(st.floats(0, 50), st.floats(0, 50), st.floats(0, 50), st.floats(0.1, 4))
def test_scores_in_unit_interval(tp, fp, fn, beta):
    assert 0.0 <= fbeta(C(tp, fp, fn), beta) <= 1.0
    assert 0.0 <= gbeta(C(tp, fp, fn), beta) <= 1.0


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        C(-1, 0, 0)


def test_counts_match_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(1, 5))
        t, p = random_sets(rng, 15, n), random_sets(rng, 15, n)
        got = confusion_counts(t, p, n)
        tp, fp, fn = oracle_counts(t, p, n)
        np.testing.assert_allclose(got.tp, tp, atol=1e-9)
        np.testing.assert_allclose(got.fp, fp, atol=1e-9)
        np.testing.assert_allclose(got.fn, fn, atol=1e-9)
        b2 = 4.0
        for c in range(n):
            den = (1 + b2) * tp[c] + fp[c] + b2 * fn[c]
            expect = (1 + b2) * tp[c] / den if den else 0.0
            assert np.atleast_1d(fbeta(got))[c] == pytest.approx(expect, abs=1e-9)
            den = tp[c] + fp[c] + 2 * fn[c]
            assert np.atleast_1d(gbeta(got))[c] == pytest.approx(tp[c] / den if den else 0.0, abs=1e-9)


# ---------------------------------------------------------------- challenge


def test_confusion_examples():
    np.testing.assert_array_equal(challenge_confusion([(0,), (1,), (1,)], [(0,), (1,), (1,)], 2), np.diag([1, 2]))
    a = challenge_confusion([(0,)], [(0, 1)], 2)
    assert a[0, 0] == 0.5 and a[1, 0] == 0.5 and a.sum() == 1.0
    np.testing.assert_array_equal(challenge_confusion([()], [()], 2), 0.0)


def test_confusion_label_out_of_range():
    with pytest.raises(ValueError):
        challenge_confusion([(2,)], [(0,)], 2)


def test_score_examples():
    t = [(0,), (1,), (1,), (0,)]
    raw, norm = challenge_score(challenge_confusion(t, t, 2), np.eye(2), t)
    assert raw == 4 and norm == 1.0
    wrong = [(1,), (0,), (0,), (1,)]
    raw, _ = challenge_score(challenge_confusion(t, wrong, 2), np.eye(2), t)
    assert raw == 0


def test_score_shape_mismatch():
    with pytest.raises(ValueError):
        challenge_score(np.zeros((2, 2)), np.eye(3))


def test_score_matches_brute_force(rng):
    for _ in range(100):
        w = rng.random((3, 3))
        t, p = random_sets(rng, 20, 3), random_sets(rng, 20, 3)
        raw, norm = challenge_score(challenge_confusion(t, p, 3), w, t)
        s = lambda pred: float(np.sum(w * oracle_confusion(t, pred, 3)))  # noqa: E731
        assert raw == pytest.approx(s(p), abs=1e-9)
        s_true, s_inact = s(t), s([()] * len(t))
        expect = 0.0 if s_true == s_inact else (s(p) - s_inact) / (s_true - s_inact)
        assert norm == pytest.approx(expect, abs=1e-9)


def test_identity_single_label_is_trace(rng):
    t = [(int(i),) for i in rng.integers(0, 4, 30)]
    p = [(int(i),) for i in rng.integers(0, 4, 30)]
    a = challenge_confusion(t, p, 4)
    raw, _ = challenge_score(a, np.eye(4))
    assert raw == np.trace(a) == sum(x == y for x, y in zip(t, p))


# ---------------------------------------------------------------- AUC


def test_auc_examples():
    assert auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc_binary([0.3] * 4, [0, 1, 0, 1]) == 0.5
    assert auc_binary([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_skips_single_class_columns():
    m, per = macro_auc(np.array([[0.1, 0.2], [0.9, 0.3]]), np.array([[0, 1], [1, 1]]))
    assert per == [1.0, None] and m == 1.0


def test_auc_matches_pair_count(rng):
    for _ in range(100):
        n = int(rng.integers(2, 25))
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        s = np.round(rng.random(n), 1)  # coarse values force ties
        assert auc_binary(s, y) == pytest.approx(oracle_auc(s, y), abs=1e-9)


# scores on a grid so the transforms stay strictly monotone in floating point
@given(st.lists(st.integers(-40, 40), min_size=4, max_size=30), st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(scores, seed):
    s = np.array(scores) / 8.0
    y = np.random.default_rng(seed).random(len(s)) < 0.5
    y[0], y[1] = True, False
    base = auc_binary(s, y)
    assert auc_binary(np.exp(s), y) == pytest.approx(base, abs=1e-12)
    assert auc_binary(s ** 3 + 2 * s, y) == pytest.approx(base, abs=1e-12)


# ---------------------------------------------------------------- binarize


def test_binarize_examples():
    assert binarize(np.ones((2, 3))) == [(0, 1, 2), (0, 1, 2)]
    assert binarize(np.array([[0.5, 0.4999]])) == [(0,)]
    assert binarize(np.array([[0.3, 0.7]]), [0.2, 0.8]) == [(0,)]


def test_binarize_into_confusion_hand_count():
    scores = np.array([[0.9, 0.2, 0.6], [0.1, 0.7, 0.4], [0.5, 0.5, 0.1]])
    true = [(0,), (1, 2), (2,)]
    a = challenge_confusion(true, binarize(scores), 3)
    # rec 0: pred {0,2} true {0} -> union 2; rec 1: pred {1} true {1,2} -> union 2;
    # rec 2: pred {0,1} true {2} -> union 3
    expect = np.zeros((3, 3))
    expect[0, 0] += 0.5
    expect[2, 0] += 0.5
    expect[1, 1] += 0.5
    expect[1, 2] += 0.5
    expect[0, 2] += 1 / 3
    expect[1, 2] += 1 / 3
    np.testing.assert_allclose(a, expect, atol=1e-15)


# ---------------------------------------------------------------- files / report


def test_weight_matrix_roundtrip(tmp_path, rng):
    w = rng.random((3, 3))
    write_weight_matrix(w, ["a", "b", "c"], tmp_path / "w.csv")
    np.testing.assert_array_equal(read_weight_matrix(tmp_path / "w.csv", ["a", "b", "c"]), w)
    with pytest.raises(ValueError):
        read_weight_matrix(tmp_path / "w.csv", ["a", "c", "b"])


def test_predictions_roundtrip(tmp_path, rng):
    s = rng.random((4, 2))
    write_predictions(tmp_path / "p.csv", ["r0", "r1", "r2", "r3"], s)
    ids, back = read_predictions(tmp_path / "p.csv")
    assert ids == ["r0", "r1", "r2", "r3"]
    np.testing.assert_array_equal(back, s)
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "id,score_class_0,score_class_1"


def test_report_roundtrip_and_macro(rng):
    s = rng.random((12, 3))
    t = random_sets(rng, 12, 3)
    rep = evaluate_predictions(s, t, ["a", "b", "c"])
    assert rep.macro_fbeta == pytest.approx(np.mean(rep.fbeta))
    assert rep.macro_gbeta == pytest.approx(np.mean(rep.gbeta))
    back = EvalReport.from_json(rep.to_json())
    assert back == EvalReport(**json.loads(rep.to_json()))
    assert back.to_json() == rep.to_json()


def test_report_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_predictions(np.zeros((0, 2)), [], ["a", "b"])
