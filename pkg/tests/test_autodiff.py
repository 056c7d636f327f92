import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stageformer import autodiff as ad
from stageformer.autodiff import DiffArray
from stageformer.gradsuite import PRIMITIVES, check_primitive, tiny_model_case


def leaf(x, dtype=np.float64):
    return DiffArray(np.asarray(x, dtype=dtype), requires_grad=True)


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------------ invariants


def test_values_size_matches_shape():
    a = DiffArray(np.zeros((2, 3, 4)))
    assert a.values.size == int(np.prod(a.shape))


def test_constant_never_allocates_grad():
    c = DiffArray(np.ones(3))
    x = leaf([1.0, 2.0, 3.0])
    ad.backward(ad.sum(ad.mul(x, c)))
    assert c.grad is None
    assert x.grad.shape == x.shape


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_tape_topological_and_unique():
    x = leaf([1.0, 2.0])
    y = ad.mul(x, x)
    z = ad.add(y, y)  # y feeds z twice
    loss = ad.sum(z)
    order = list(ad.Tape(loss))
    pos = {n.node_id: i for i, n in enumerate(order)}
    assert len(pos) == len(order)
    for node in order:
        for parent in node._parents:
            if parent.node_id in pos:
                assert pos[parent.node_id] < pos[node.node_id]
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 4 * x.values)


def test_backward_requires_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_broadcast_mismatch_is_dimension_error():
    with pytest.raises(ad.DimensionError):
        ad.add(leaf(np.ones((2, 3))), leaf(np.ones(2)))


def test_float32_stays_float32():
    x = leaf(np.ones((2, 3)), np.float32)
    y = ad.gelu(ad.add(ad.scale(x, 0.5), 1.0))
    assert y.dtype == np.float32


# ------------------------------------------------------------------ examples


def test_elementwise_examples():
    assert ad.tanh(DiffArray(np.array(0.0))).item() == 0.0
    assert ad.sigmoid(DiffArray(np.array(0.0))).item() == 0.5
    np.testing.assert_array_equal(ad.mul(DiffArray([1.0, 2, 3]), DiffArray([4.0, 5, 6])).values, [4, 10, 18])
    np.testing.assert_array_equal(ad.elementwise("mul", DiffArray([1.0, 2]), DiffArray([3.0, 4])).values, [3, 8])
    np.testing.assert_array_equal(ad.elementwise("relu", DiffArray([-1.0, 2])).values, [0, 2])


def test_matmul_examples():
    m = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(DiffArray(np.eye(2)), DiffArray(m)).values, m)
    np.testing.assert_array_equal(ad.matmul(DiffArray([[1.0, 2]]), DiffArray([[3.0], [4]])).values, [[11]])


def test_matmul_sum_gradient(rng):
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    err = ad.finite_diff_check(lambda: ad.sum(ad.matmul(a, b)), [a], h=1e-4)
    assert err < 1e-5


def test_matmul_inner_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.matmul(DiffArray(np.ones((2, 3))), DiffArray(np.ones((2, 3))))


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 3, 10))
    y = ad.grouped_conv1d(DiffArray(x), DiffArray(np.ones((3, 1, 1))), DiffArray(np.zeros(3)), stride=1, groups=3)
    np.testing.assert_array_equal(y.values, x)


def test_conv_pairwise_sums():
    y = ad.grouped_conv1d(DiffArray([[[1.0, 2, 3, 4]]]), DiffArray([[[1.0, 1]]]), stride=2, groups=1)
    np.testing.assert_array_equal(y.values, [[[3, 7]]])


def test_conv_group_isolation(rng):
    x = rng.standard_normal((2, 12, 64))
    w, b = DiffArray(rng.standard_normal((12 * 4, 1, 5))), DiffArray(rng.standard_normal(48))
    base = ad.grouped_conv1d(DiffArray(x), w, b, stride=2, groups=12).values
    x2 = x.copy()
    x2[:, 5] += rng.standard_normal(64)
    out = ad.grouped_conv1d(DiffArray(x2), w, b, stride=2, groups=12).values
    changed = np.any(out != base, axis=(0, 2)).reshape(12, 4)
    assert changed[5].all()
    assert not np.delete(changed, 5, axis=0).any()


def test_conv_too_short():
    with pytest.raises(ad.InputTooShortError):
        ad.grouped_conv1d(DiffArray(np.ones((1, 1, 3))), DiffArray(np.ones((1, 1, 5))))


def test_conv_output_length_formula():
    assert ad.conv_output_length(7500, 15, 3) == 2496
    assert ad.conv_output_length(4, 2, 2) == 2


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(DiffArray([0.0, 0, 0])).values, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(DiffArray([1000.0, 0])).values, [1, 0], atol=1e-12)


def test_softmax_gradient(rng):
    x = leaf(rng.standard_normal((4, 7)))
    r = DiffArray(rng.standard_normal((4, 7)))
    assert ad.finite_diff_check(lambda: ad.sum(ad.mul(ad.softmax(x), r)), [x]) < 1e-5


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = ad.softmax(DiffArray(x)).values
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_layer_norm_examples():
    g, z = DiffArray(np.ones(3)), DiffArray(np.zeros(3))
    np.testing.assert_array_equal(ad.layer_norm(DiffArray([[2.0, 2, 2]]), g, z).values, 0.0)
    out = ad.layer_norm(DiffArray([[1.0, 3]]), DiffArray(np.ones(2)), DiffArray(np.zeros(2))).values
    np.testing.assert_allclose(out, [[-1, 1]], atol=1e-4)


def test_layer_norm_gradient(rng):
    x, g, b = leaf(rng.standard_normal((2, 8))), leaf(1 + 0.1 * rng.standard_normal(8)), leaf(rng.standard_normal(8))
    r = DiffArray(rng.standard_normal((2, 8)))
    assert ad.finite_diff_check(lambda: ad.sum(ad.mul(ad.layer_norm(x, g, b), r)), [x, g, b]) < 1e-5


def test_structural_examples(rng):
    cls, tok = DiffArray(np.zeros((2, 1, 4))), DiffArray(np.ones((2, 5, 4)))
    assert ad.concat([cls, tok], axis=1).shape == (2, 6, 4)
    x = DiffArray(rng.standard_normal((3, 7)))
    parts = ad.concat([ad.slice_axis(x, 1, 0, 3), ad.slice_axis(x, 1, 3, 7)], axis=1)
    np.testing.assert_array_equal(parts.values, x.values)
    y = DiffArray(rng.standard_normal((2, 3, 4)))
    np.testing.assert_array_equal(ad.transpose(ad.transpose(y, (0, 2, 1)), (0, 2, 1)).values, y.values)
    assert ad.structural("reshape", y, (6, 4)).shape == (6, 4)


def test_backward_examples(rng):
    x = leaf(rng.standard_normal((3, 2)))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 2)))
    x.zero_grad()
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.values)


def test_backward_is_deterministic(rng):
    params, f = tiny_model_case(rng)
    plist = list(params.values())
    ad.backward(f())
    first = [p.grad.copy() for p in plist]
    ad.zero_grads(plist)
    ad.backward(f())
    for a, p in zip(first, plist):
        np.testing.assert_array_equal(a, p.grad)


def test_finite_diff_check_examples(rng):
    x = leaf(rng.standard_normal(5))
    assert ad.finite_diff_check(lambda: ad.sum(x), [x]) < 1e-10
    assert ad.finite_diff_check(lambda: ad.sum(ad.tanh(x)), [x]) < 1e-6


def test_model_gradient_twenty_params(rng):
    params, f = tiny_model_case(rng)
    err = ad.finite_diff_check(f, list(params.values()), h=(3e-4, 1e-4, 3e-5), n_coords=20,
                               rng=rng, order=4, floor=1e-7)
    assert err < 1e-4


def test_bce_examples():
    z = DiffArray(np.zeros((2, 3)))
    assert ad.bce_with_logits(z, np.ones((2, 3))).item() == pytest.approx(np.log(2), abs=1e-15)
    big = DiffArray(np.array([[800.0]]))
    assert ad.bce_with_logits(big, np.ones((1, 1))).item() == 0.0
    assert np.isfinite(ad.bce_with_logits(DiffArray(np.array([[-800.0]])), np.ones((1, 1))).item())


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_each_primitive_float32_close_to_float64(name):
    rng = np.random.default_rng(7)
    for _ in range(5):
        assert check_primitive(name, rng, np.float32) < 1e-2


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 12)),
              elements=st.floats(-1e3, 1e3)), st.integers(0, 2**32 - 1))
def test_canonical_reductions_are_permutation_exact(x, seed):
    perm = np.random.default_rng(seed).permutation(x.shape[1])
    a, b = ad.DiffArray(x), ad.DiffArray(x[:, perm])
    np.testing.assert_array_equal(ad.sum(a, axis=1, canonical=True).values, ad.sum(b, axis=1, canonical=True).values)
    np.testing.assert_array_equal(ad.softmax(a, canonical=True).values[:, perm], ad.softmax(b, canonical=True).values)


def test_canonical_sum_gradient_matches_plain(rng):
    x = ad.DiffArray(rng.standard_normal((3, 5)), requires_grad=True)
    w = ad.DiffArray(rng.standard_normal(3))
    ad.backward(ad.sum(ad.mul(ad.sum(x, axis=1, canonical=True), w)))
    np.testing.assert_array_equal(x.grad, np.broadcast_to(w.values[:, None], (3, 5)))
