import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from roilab import tensor as T
from roilab.gradcheck import grad_check
from roilab.optim import sgd_step
from roilab.tensor import BatchNormState, Parameter, ShapeError, Tensor

from conftest import block_mean, naive_conv2d


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


# --- conv2d -----------------------------------------------------------------


def test_conv2d_identity_kernel():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, [[[[1, 2], [3, 4]]]])


def test_conv2d_all_ones_kernel_sums_input():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == naive_conv2d(x, np.ones((1, 1, 2, 2)), [0.0], 1, 0).item() == 10


@pytest.mark.parametrize(
    "shape,o,k,stride,padding",
    [
        ((2, 4, 9, 9), 3, 3, 1, 1),
        ((2, 4, 9, 9), 2, 3, 1, 0),
        ((1, 3, 8, 8), 5, 4, 2, 1),
        ((2, 2, 6, 6), 3, 2, 2, 0),
        ((1, 1, 5, 7), 2, 3, 2, 1),
    ],
)
def test_conv2d_matches_naive_reference(rng, shape, o, k, stride, padding):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((o, shape[1], k, k))
    b = rng.standard_normal(o)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    want = naive_conv2d(x, w, b, stride, padding)
    np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)


def test_conv2d_float32_matches_reference(rng):
    x = rng.standard_normal((2, 4, 9, 9)).astype(np.float32)
    w = rng.standard_normal((3, 4, 3, 3)).astype(np.float32)
    got = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert got.dtype == np.float32
    np.testing.assert_allclose(got, naive_conv2d(x, w, None, 1, 1), rtol=1e-5, atol=1e-5)


def test_conv2d_weight_gradient_of_sum_matches_finite_differences(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))

    def fn(wt):
        return T.tensor_sum(T.conv2d(Tensor(x), wt, Tensor(np.zeros(2)), padding=1))

    assert grad_check(fn, [w], eps=1e-3, max_coords=None) < 1e-4


def test_conv2d_rejects_channel_mismatch_naming_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_rejects_inexact_output_size():
    with pytest.raises(ShapeError, match="not exact"):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=2)


# --- relu -------------------------------------------------------------------


def test_relu_values_and_zero_subgradient():
    x = leaf([-1.0, 0.0, 2.0])
    out = T.relu(x)
    np.testing.assert_array_equal(out.data, [0, 0, 2])
    T.backward(T.tensor_sum(out))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_relu_leaves_nonnegative_input_unchanged(rng):
    x = np.abs(rng.standard_normal(10))
    np.testing.assert_array_equal(T.relu(Tensor(x)).data, x)


# --- batchnorm --------------------------------------------------------------


def test_batchnorm_constant_channel_gives_zero():
    x = Tensor(np.full((2, 1, 2, 2), 3.0))
    out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1, np.float64), train=True)
    np.testing.assert_array_equal(out.data, 0)


def test_batchnorm_two_values_hand_evaluated():
    x = Tensor(np.array([0.0, 2.0]).reshape(2, 1, 1, 1))
    out = T.batchnorm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1, np.float64), True, eps=1e-5)
    expected = 1 / np.sqrt(1 + 1e-5)  # (x - 1) / sqrt(var + eps) with var = 1
    np.testing.assert_allclose(out.data.ravel(), [-expected, expected], rtol=1e-12)
    assert abs(expected - 0.99999) < 1e-5


def test_batchnorm_updates_running_stats_by_ema(rng):
    x = rng.standard_normal((4, 2, 3, 3))
    state = BatchNormState.fresh(2, np.float64)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state, True, momentum=0.1)
    m = 4 * 9
    np.testing.assert_allclose(state.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_mode_is_affine(rng):
    state = BatchNormState(rng.standard_normal(3), rng.random(3) + 0.5)
    gamma, beta = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
    f = lambda x: T.batchnorm2d(Tensor(x), gamma, beta, state, train=False).data
    a, b = rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 2, 2))
    zero = f(np.zeros_like(a))
    # affine: f(a + b) - f(0) == (f(a) - f(0)) + (f(b) - f(0))
    np.testing.assert_allclose(f(a + b) - zero, (f(a) - zero) + (f(b) - zero), atol=1e-12)
    before = state.running_mean.copy()
    f(a)
    np.testing.assert_array_equal(state.running_mean, before)


def test_batchnorm_train_rejects_single_value():
    with pytest.raises(ValueError, match="N\\*H\\*W >= 2"):
        T.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)), BatchNormState.fresh(1), True)


# --- pooling, linear, merge -------------------------------------------------


def test_global_avg_pool():
    x = np.array([[[[1.0, 3.0], [5.0, 7.0]]]])
    assert T.global_avg_pool(Tensor(x)).data.tolist() == [[4.0]]
    y = np.arange(6.0).reshape(2, 3, 1, 1)
    np.testing.assert_array_equal(T.global_avg_pool(Tensor(y)).data, y[:, :, 0, 0])


def test_global_avg_pool_gradient_is_uniform():
    x = leaf(np.zeros((1, 2, 2, 3)))
    T.backward(T.tensor_sum(T.global_avg_pool(x)))
    np.testing.assert_allclose(x.grad, 1 / 6)


def test_linear_examples():
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    np.testing.assert_array_equal(T.linear(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2))).data, x)
    out = T.linear(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0, 4.0]])), Tensor(np.array([5.0])))
    assert out.data.tolist() == [[16.0]]


def test_linear_shape_mismatch():
    with pytest.raises(ShapeError):
        T.linear(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))), Tensor(np.zeros(2)))


def test_merge_examples():
    a = Tensor(np.array([2.0, 3.0]))
    assert T.elementwise_merge(a, Tensor(np.array([4.0, 5.0])), "mul").data.tolist() == [8.0, 15.0]
    assert T.elementwise_merge(a, Tensor(np.array([4.0, 5.0])), "add").data.tolist() == [6.0, 8.0]


def test_merge_shape_mismatch_and_mode():
    with pytest.raises(ShapeError):
        T.elementwise_merge(Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 1))), "add")
    with pytest.raises(ValueError, match="merge mode"):
        T.elementwise_merge(Tensor(np.zeros(2)), Tensor(np.zeros(2)), "sub")


@settings(max_examples=50, deadline=None)
@given(
    hnp.arrays(
        dtype=st.sampled_from([np.float32, np.float64]),
        shape=hnp.array_shapes(min_dims=1, max_dims=4, max_side=5),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
def test_merge_identities_are_bitwise(a):
    t = Tensor(a)
    assert np.array_equal(T.elementwise_merge(t, Tensor(np.zeros_like(a)), "add").data, a)
    assert np.array_equal(T.elementwise_merge(t, Tensor(np.ones_like(a)), "mul").data, a)


def test_merge_gradients_reach_both_inputs():
    a, b = leaf([2.0, 3.0]), leaf([4.0, 5.0])
    T.backward(T.tensor_sum(T.elementwise_merge(a, b, "mul")))
    assert a.grad.tolist() == [4.0, 5.0] and b.grad.tolist() == [2.0, 3.0]


# --- loss -------------------------------------------------------------------


@pytest.mark.parametrize("k", [2, 5, 10])
def test_cross_entropy_uniform_logits(k):
    loss = T.softmax_cross_entropy(Tensor(np.zeros((3, k))), np.array([0, 1, k - 1]))
    assert loss.item() == pytest.approx(np.log(k), rel=1e-12)


def test_cross_entropy_saturated():
    loss = T.softmax_cross_entropy(Tensor(np.array([[20.0, -20.0]])), np.array([0]))
    assert loss.item() < 1e-8


def test_cross_entropy_gradient_formula(rng):
    z = leaf(rng.standard_normal((4, 3)))
    labels = np.array([0, 2, 1, 2])
    T.backward(T.softmax_cross_entropy(z, labels))
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(z.grad, (p - np.eye(3)[labels]) / 4, atol=1e-15)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError, match="labels"):
        T.softmax_cross_entropy(Tensor(np.zeros((1, 3))), np.array([3]))


# --- area_resize ------------------------------------------------------------


def test_area_resize_examples():
    ones = np.ones((1, 1, 8, 8))
    for t in (1, 2, 4, 8):
        np.testing.assert_array_equal(T.area_resize(ones, t, t).data, np.ones((1, 1, t, t)))
    m = np.zeros((1, 1, 4, 4))
    m[0, 0, 0, 0] = 1
    np.testing.assert_array_equal(T.area_resize(m, 2, 2).data[0, 0], [[0.25, 0], [0, 0]])
    np.testing.assert_array_equal(T.area_resize(m, 4, 4).data, m)


def test_area_resize_matches_block_mean(rng):
    m = (rng.random((3, 1, 12, 12)) > 0.5).astype(np.float64)
    for th, tw in [(6, 6), (4, 3), (3, 12), (1, 1)]:
        out = T.area_resize(m, th, tw).data
        np.testing.assert_allclose(out, block_mean(m, th, tw))
        assert out.min() >= 0 and out.max() <= 1


def test_area_resize_rejects_non_divisible_sizes():
    with pytest.raises(ShapeError, match="10x10.*3x3"):
        T.area_resize(np.zeros((1, 1, 10, 10)), 3, 3)


# --- backward ---------------------------------------------------------------


def test_backward_sum_gives_ones():
    p = leaf(np.arange(4.0))
    T.backward(T.tensor_sum(p))
    np.testing.assert_array_equal(p.grad, 1)


def test_backward_sum_of_squares():
    p = leaf([1.0, 2.0])
    T.backward(T.tensor_sum(T.square(p)))
    assert p.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_and_ignores_uninvolved():
    p, q = leaf([1.0, 2.0]), leaf([5.0])
    loss = T.tensor_sum(T.square(p))
    T.backward(loss)
    T.backward(loss)
    assert p.grad.tolist() == [4.0, 8.0]
    assert q.grad is None


def test_backward_sums_contributions_of_shared_tensor(rng):
    # x feeds two consumers: relu(x) and x * x
    x0 = rng.standard_normal((2, 3)) + 0.5

    def fn(x):
        return T.tensor_sum(T.add(T.elementwise_merge(T.relu(x), x, "mul"), T.square(x)))

    x = leaf(x0)
    T.backward(fn(x))
    np.testing.assert_allclose(x.grad, 2 * np.maximum(x0, 0) + 2 * x0)
    assert grad_check(fn, [np.where(np.abs(x0) < 0.01, 0.5, x0)], max_coords=None) < 1e-6


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(T.relu(leaf([1.0, 2.0])))


# --- sgd --------------------------------------------------------------------


def _param(value, grad):
    p = Parameter("p", Tensor(np.array(value, dtype=np.float64)))
    p.value.grad = np.array(grad, dtype=np.float64)
    return p


def test_sgd_plain_step():
    p = _param([1.0], [2.0])
    sgd_step([p], lr=0.1)
    assert p.value.data.tolist() == pytest.approx([0.8])
    assert p.value.grad is None


def test_sgd_zero_lr_keeps_values():
    p = _param([1.0, -3.0], [2.0, 7.0])
    sgd_step([p], lr=0.0, momentum=0.9, weight_decay=0.1)
    assert p.value.data.tolist() == [1.0, -3.0]


def test_sgd_momentum_two_steps_hand_unrolled():
    lr, mu, wd = 0.1, 0.9, 0.01
    p = _param([1.0], [2.0])
    sgd_step([p], lr, mu, wd)
    v1 = 2.0 + wd * 1.0
    x1 = 1.0 - lr * v1
    assert p.value.data[0] == pytest.approx(x1, rel=1e-12)
    p.value.grad = np.array([-1.0])
    sgd_step([p], lr, mu, wd)
    v2 = mu * v1 + (-1.0) + wd * x1
    assert p.value.data[0] == pytest.approx(x1 - lr * v2, rel=1e-12)


def test_sgd_rejects_missing_grad():
    p = Parameter("w", Tensor(np.zeros(2)))
    with pytest.raises(ValueError, match="w"):
        sgd_step([p], 0.1)
