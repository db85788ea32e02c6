import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from condvit import autodiff as ad
from condvit.autodiff import DimensionError, GraphError, NumericError


def p(values, dtype=np.float64):
    return ad.Tensor(np.array(values), requires_grad=True, dtype=dtype)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(p([[1, 0], [0, 1]]), p([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    assert ad.matmul(p([[1, 2]]), p([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_grad_of_sum():
    a = p([[1, 2], [3, 4]])
    b = p([[1, 1], [1, 1]])
    ad.backward(ad.sum_(a @ b))
    np.testing.assert_allclose(a.grad, [[2, 2], [2, 2]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(p(np.ones((2, 3))), p(np.ones((2, 3))))


def test_matmul_single_row_matches_batched_rows():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7)).astype(np.float32)
    b = rng.standard_normal((7, 3)).astype(np.float32)
    full = ad.matmul(ad.tensor(a), ad.tensor(b)).data
    for i in range(5):
        np.testing.assert_array_equal(ad.matmul(ad.tensor(a[i:i + 1]), ad.tensor(b)).data, full[i:i + 1])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(p([0, 0, 0])).data, [1 / 3] * 3, atol=1e-12)
    np.testing.assert_allclose(ad.softmax(p([1000, 0])).data, [1, 0], atol=1e-12)
    e1, e2 = math.exp(1), math.exp(2)
    np.testing.assert_allclose(ad.softmax(p([1, 2])).data, [e1 / (e1 + e2), e2 / (e1 + e2)], atol=1e-5)
    np.testing.assert_allclose(ad.softmax(p([1, 2])).data, [0.26894, 0.73106], atol=1e-5)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.softmax(p([np.nan, 0.0]))
    with pytest.raises(NumericError):
        ad.log_softmax(p([np.inf, 0.0]))


def test_layer_norm_examples():
    out = ad.layer_norm(p([1, 1, 1]), p([1, 1, 1]), p([0, 0, 0]), eps=1e-5)
    np.testing.assert_allclose(out.data, [0, 0, 0], atol=1e-12)
    out = ad.layer_norm(p([-1, 1]), p([1, 1]), p([0, 0]), eps=0.0)
    np.testing.assert_allclose(out.data, [-1, 1], atol=1e-12)


def test_layer_norm_grad_random_4x8():
    rng = np.random.default_rng(3)
    with ad.precision("float64"):
        x = ad.parameter(rng.standard_normal((4, 8)))
        g = ad.parameter(rng.uniform(0.5, 1.5, 8))
        b = ad.parameter(rng.standard_normal(8))
        w = rng.standard_normal((4, 8))
        err = ad.grad_check(lambda: ad.sum_(ad.layer_norm(x, g, b) * ad.tensor(w)), [x, g, b])
    assert err < 1e-4


def test_small_examples():
    assert ad.gelu(p([0.0])).data.tolist() == [0.0]
    np.testing.assert_allclose(ad.l2_normalize(p([3, 4])).data, [0.6, 0.8], atol=1e-12)
    out = ad.concat([p(np.zeros((1, 196, 64))), p(np.zeros((1, 1, 64)))], axis=1)
    assert out.shape == (1, 197, 64)


def test_gelu_matches_erf_form():
    x = np.linspace(-4, 4, 41)
    expect = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
    np.testing.assert_allclose(ad.gelu(p(x)).data, expect, rtol=1e-12, atol=1e-15)


def test_concat_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.concat([p(np.zeros((2, 3))), p(np.zeros((3, 2)))], axis=0)


def test_broadcast_limits():
    ad.add(p(np.ones((2, 3))), p(np.ones(3)))
    ad.add(p(np.ones((2, 3))), p(2.0))
    with pytest.raises(DimensionError):
        ad.add(p(np.ones((2, 3))), p(np.ones((2, 1))))


def test_take_rows_out_of_range():
    with pytest.raises(IndexError):
        ad.take_rows(p(np.zeros((3, 2))), [3])


# ---------------------------------------------------------------------------
# backward semantics
# ---------------------------------------------------------------------------


def test_backward_polynomial():
    x = p([3.0])
    ad.backward(ad.sum_(x * x))
    np.testing.assert_allclose(x.grad, [6.0])


def test_backward_disconnected_leaf_gets_zeros():
    x, y = p([1.0, 2.0]), p([5.0])
    ad.backward(ad.sum_(x * x))
    np.testing.assert_array_equal(y.grad if y.grad is not None else np.zeros(1), [0.0])


def test_backward_non_scalar_is_error():
    with pytest.raises(GraphError):
        ad.backward(p([1.0, 2.0]) * 2.0)


def test_backward_twice_is_error():
    x = p([2.0])
    loss = ad.sum_(x * x)
    ad.backward(loss)
    with pytest.raises(GraphError):
        ad.backward(loss)


def test_no_grad_records_nothing():
    x = p([2.0])
    with ad.no_grad():
        y = ad.sum_(x * x)
    assert not y.requires_grad
    with pytest.raises(GraphError):
        ad.backward(y)


def test_frozen_leaf_never_accumulates():
    x = p([2.0])
    w = p([3.0])
    w.requires_grad = False
    ad.backward(ad.sum_(x * w))
    assert w.grad is None
    np.testing.assert_allclose(x.grad, [3.0])


def test_gradients_accumulate_until_reset():
    x = p([1.0])
    ad.backward(ad.sum_(x * 2.0))
    ad.backward(ad.sum_(x * 3.0))
    np.testing.assert_allclose(x.grad, [5.0])
    x.zero_grad()
    assert x.grad is None or not np.any(x.grad)


def test_infonce_tau_gradient_finite_and_nonzero():
    from condvit.trainer import Temperature, infonce_half

    with ad.precision("float64"):
        temp = Temperature()
        loss = infonce_half(ad.tensor(np.eye(2)), temp.tensor())
        ad.backward(loss)
        g = float(temp.param.grad)
        assert math.isfinite(g) and g != 0.0
        assert ad.grad_check(lambda: infonce_half(ad.tensor(np.eye(2)), temp.tensor()), [temp.param]) < 1e-6


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(11)
        a = ad.parameter(rng.standard_normal((6, 5)).astype(np.float32))
        b = ad.parameter(rng.standard_normal((5, 4)).astype(np.float32))
        ad.backward(ad.sum_(ad.gelu(a @ b)))
        return a.grad.copy(), b.grad.copy()

    (a1, b1), (a2, b2) = run(), run()
    assert a1.tobytes() == a2.tobytes() and b1.tobytes() == b2.tobytes()


# ---------------------------------------------------------------------------
# grad_check itself
# ---------------------------------------------------------------------------


def test_grad_check_square():
    with ad.precision("float64"):
        x = ad.parameter(np.array([3.0]))
        assert ad.grad_check(lambda: ad.sum_(x * x), [x], h=1e-4) < 1e-6


def test_grad_check_constant():
    with ad.precision("float64"):
        x = ad.parameter(np.array([3.0]))
        assert ad.grad_check(lambda: ad.tensor(np.array(7.0)), [x]) == 0.0


def test_grad_check_detects_wrong_gradient():
    def bad_square(x):
        # forward x**2 with a backward rule that is off by 50%
        return ad._result(x.data ** 2, (x,), lambda g: (g * 3.0 * x.data,))

    with ad.precision("float64"):
        x = ad.parameter(np.array([1.5, -0.5]))
        assert ad.grad_check(lambda: ad.sum_(bad_square(x)), [x]) > 0.1


def test_grad_check_five_point_stencil():
    with ad.precision("float64"):
        # cubic terms: the two-point stencil is off by h^2, the five-point one is exact
        x = ad.parameter(np.array([2.0, -1.0]))
        fn = lambda: ad.sum_(x * x * x * ad.tensor(np.array([1e3, 1e3])))
        two = ad.grad_check(fn, [x], h=1e-2)
        four = ad.grad_check(fn, [x], h=1e-2, order=4)
        assert two > 1e-6 and four < 1e-10
        with pytest.raises(ValueError):
            ad.grad_check(fn, [x], order=3)


def test_grad_check_float32_reference():
    x = ad.parameter(np.array([0.3, -1.2, 2.0]))
    assert x.dtype == np.float32
    assert ad.grad_check(lambda: ad.sum_(ad.gelu(x) * ad.exp(x)), [x]) < 1e-3
    assert x.dtype == np.float32


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

finite = st.floats(-1e3, 1e3, allow_nan=False, width=64)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(ad.tensor(x), axis=-1).data
    assert np.all(out > 0) or np.all(out >= 0)
    assert np.all(out <= 1)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_l2_normalize_unit_norm(x):
    if np.linalg.norm(x.astype(np.float32)) <= 1e-6:
        return
    np.testing.assert_allclose(np.linalg.norm(ad.l2_normalize(ad.tensor(x)).data), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))
def test_concat_then_slice_is_identity(n1, n2, d):
    rng = np.random.default_rng(n1 * 100 + n2 * 10 + d)
    a, b = rng.standard_normal((n1, d)).astype(np.float32), rng.standard_normal((n2, d)).astype(np.float32)
    cat = ad.concat([ad.tensor(a), ad.tensor(b)], axis=0)
    np.testing.assert_array_equal(ad.slice_(cat, slice(0, n1)).data, a)
    np.testing.assert_array_equal(ad.slice_(cat, slice(n1, None)).data, b)


def test_float64_mode_and_default():
    assert ad.get_default_dtype() == np.float32
    assert ad.tensor([1.0]).dtype == np.float32
    with ad.precision("float64"):
        assert ad.tensor([1.0]).dtype == np.float64
    assert ad.get_default_dtype() == np.float32
