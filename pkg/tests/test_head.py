import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stageformer import autodiff as ad
from stageformer.autodiff import DiffArray
from stageformer.autodiff.gradcheck import finite_diff_check
from stageformer.head import (
    LeadAttribution,
    gated_attention,
    gated_head,
    gated_logits,
    init_gated_head,
    init_pooled_head,
    lead_attribution,
    pooled_head,
)


def gated(rng, S=16, N=3, leads=None):
    p = init_gated_head(S, N, rng, leads=leads)
    for k in ("head.bq", "head.bk", "head.proj_b", "head.cls_b"):
        p[k] = DiffArray(0.1 * rng.standard_normal(p[k].shape), requires_grad=True)
    return p


def zero(p, *names):
    for n in names:
        p[n] = DiffArray(np.zeros(p[n].shape), requires_grad=True)


def test_zero_query_gives_zero_gate(rng):
    p = gated(rng)
    zero(p, "head.wq", "head.bq")
    a = gated_attention(DiffArray(rng.standard_normal((2, 4, 16))), p)
    np.testing.assert_array_equal(a.values, 0.0)


def test_zero_key_halves_query(rng):
    p = gated(rng)
    zero(p, "head.wk", "head.bk")
    x = rng.standard_normal((2, 4, 16))
    a = gated_attention(DiffArray(x), p)
    q = np.tanh(x @ p["head.wq"].values + p["head.bq"].values)
    np.testing.assert_allclose(a.values, 0.5 * q, rtol=0, atol=1e-15)


@given(arrays(np.float64, (2, 3, 4), elements=st.floats(-1e6, 1e6)), st.integers(0, 2**32 - 1))
def test_gate_strictly_bounded(x, seed):
    rng = np.random.default_rng(seed)
    p = init_gated_head(4, 2, rng)
    a = gated_attention(DiffArray(x), p).values
    assert np.all(np.abs(a) <= 1.0)
    # strictness holds away from float saturation
    small = gated_attention(DiffArray(np.clip(x, -3, 3) * 0.1), p).values
    assert np.all(np.abs(small) < 1.0)


def test_single_lead(rng):
    p = gated(rng)
    x = rng.standard_normal((2, 1, 16))
    logits, w = gated_head(DiffArray(x), p)
    np.testing.assert_array_equal(w.values, 1.0)
    expect = x[:, 0] @ p["head.cls_w"].values.T + p["head.cls_b"].values
    np.testing.assert_allclose(logits.values, expect, atol=1e-12)


def test_uniform_scores_average_leads(rng):
    p = gated(rng)
    zero(p, "head.proj_w", "head.proj_b")
    x = rng.standard_normal((2, 5, 16))
    logits, w = gated_head(DiffArray(x), p)
    np.testing.assert_allclose(w.values, 0.2, atol=1e-15)
    expect = x.mean(1) @ p["head.cls_w"].values.T + p["head.cls_b"].values
    np.testing.assert_allclose(logits.values, expect, atol=1e-12)


@pytest.mark.parametrize("leads", [None, 12])
def test_gated_rows_and_gradient(rng, leads):
    p = gated(rng, leads=leads)
    x = DiffArray(rng.standard_normal((2, 12, 16)), requires_grad=True)
    _, w = gated_head(x, p)
    assert w.shape == (2, 3, 12)
    assert np.all(w.values >= 0)
    np.testing.assert_allclose(w.values.sum(-1), 1.0, atol=1e-6)
    proj = rng.standard_normal((2, 3))

    def f():
        return ad.sum(ad.mul(gated_head(x, p)[0], DiffArray(proj)))

    err = finite_diff_check(f, [x, *p.values()], n_coords=60, rng=rng, order=4, floor=1e-9)
    assert err < 1e-5


def test_pooled_examples(rng):
    p = init_pooled_head(16, 3, rng)
    v = rng.standard_normal(16)
    x = np.broadcast_to(v, (2, 4, 16)).copy()
    np.testing.assert_allclose(pooled_head(DiffArray(x), p).values,
                               np.broadcast_to(v @ p["head.pool_w"].values, (2, 3)), atol=1e-12)
    b = rng.standard_normal(3)
    p = {"head.pool_w": DiffArray(np.zeros((16, 3))), "head.pool_b": DiffArray(b)}
    np.testing.assert_array_equal(pooled_head(DiffArray(rng.standard_normal((2, 4, 16))), p).values,
                                  np.broadcast_to(b, (2, 3)))


def test_pooled_gradient(rng):
    p = init_pooled_head(16, 3, rng)
    x = DiffArray(rng.standard_normal((2, 5, 16)), requires_grad=True)
    proj = rng.standard_normal((2, 3))
    err = finite_diff_check(lambda: ad.sum(ad.mul(pooled_head(x, p), DiffArray(proj))),
                            [x, *p.values()], n_coords=40, rng=rng, order=4, floor=1e-9)
    assert err < 1e-5


def test_lead_permutation(rng):
    p = gated(rng)
    x = rng.standard_normal((2, 12, 16))
    perm = rng.permutation(12)
    l0, w0 = gated_head(DiffArray(x), p)
    l1, w1 = gated_head(DiffArray(x[:, perm]), p)
    np.testing.assert_array_equal(w1.values, w0.values[:, :, perm])
    np.testing.assert_array_equal(l1.values, l0.values)


def test_gated_pooled_tie(rng):
    C, S, N = 4, 16, 3
    g = gated(rng, S, N)
    zero(g, "head.proj_w", "head.proj_b")
    pw = rng.standard_normal((S, N))
    pb = rng.standard_normal(N)
    g["head.cls_w"] = DiffArray(pw.T.copy())
    g["head.cls_b"] = DiffArray(pb)
    pooled = {"head.pool_w": DiffArray(pw), "head.pool_b": DiffArray(pb)}
    # dyadic entries make every sum exact, so the two orders of summation agree bit for bit
    x = rng.integers(-8, 8, (2, C, S)) / 8.0
    g["head.cls_w"] = DiffArray(np.round(pw.T * 8) / 8)
    pooled["head.pool_w"] = DiffArray(np.round(pw * 8) / 8)
    lg, _ = gated_head(DiffArray(x), g)
    lp = pooled_head(DiffArray(x), pooled)
    np.testing.assert_array_equal(lg.values, lp.values)


def test_attribution_examples(rng):
    p = gated(rng)
    _, w = gated_head(DiffArray(rng.standard_normal((2, 6, 16))), p)
    att = lead_attribution(w, ["a", "b", "c"], [f"L{i}" for i in range(6)], sample=1)
    np.testing.assert_allclose(att.weights.sum(1), 1.0, atol=1e-12)
    _, w1 = gated_head(DiffArray(rng.standard_normal((2, 1, 16))), p)
    np.testing.assert_array_equal(lead_attribution(w1).weights, 1.0)


def test_attribution_roundtrip(rng, tmp_path):
    p = gated(rng)
    _, w = gated_head(DiffArray(rng.standard_normal((1, 12, 16))), p)
    att = lead_attribution(w, ["af", "rbbb", "std"], ["I", "II", "III", "aVR", "aVL", "aVF",
                                                     "V1", "V2", "V3", "V4", "V5", "V6"])
    att.save(tmp_path / "a.csv")
    back = LeadAttribution.load(tmp_path / "a.csv")
    np.testing.assert_array_equal(back.weights, att.weights)
    assert back.class_names == att.class_names and back.lead_names == att.lead_names
