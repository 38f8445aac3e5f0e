import math

import numpy as np
import pytest

from murax.autograd import (
    Tape,
    Tensor,
    TensorError,
    add,
    avg_pool2d,
    batch_norm2d,
    concat_channels,
    conv2d,
    elementwise,
    grad_check,
    linear,
    max_pool2d,
    mul,
    permute,
    pool2d,
    relu,
    sigmoid,
    slice_channels,
    sum_all,
    weighted_bce,
)
from murax.autograd.gradcheck import standard_cases


def naive_conv(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride : i * stride + kh, j * stride : j * stride + kw]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    if b is not None:
        out += b[None, :, None, None]
    return out


def test_conv_scalar_kernel_scales():
    x = Tensor(np.ones((1, 1, 4, 4)))
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    np.testing.assert_array_equal(conv2d(x, w).data, np.full((1, 1, 4, 4), 2.0))


def test_conv_output_shape_formula():
    out = conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    assert out.shape == (1, 1, 3, 3)


def test_conv_hand_evaluated_windows():
    x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    # windows: 1+5, 2+6, 4+8, 5+9
    np.testing.assert_array_equal(conv2d(x, w).data[0, 0], [[6.0, 8.0], [12.0, 14.0]])


@pytest.mark.parametrize("k,stride,pad", [(1, 1, 0), (3, 1, 1), (3, 1, 0), (3, 2, 1), (2, 2, 0), (7, 2, 3), (5, 1, 2)])
def test_conv_matches_naive_loop(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 9, 8))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, naive_conv(x, w, b, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv_layouts_agree(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((5, 3, 3, 3))
    nchw = conv2d(Tensor(x), Tensor(w), padding=1).data
    cnhw = conv2d(Tensor(x.transpose(1, 0, 2, 3).copy()), Tensor(w), padding=1, layout="CNHW").data
    np.testing.assert_allclose(cnhw.transpose(1, 0, 2, 3), nchw, atol=1e-12)


def test_conv_channel_mismatch_names_dimensions():
    with pytest.raises(TensorError, match="C=3.*C=2"):
        conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 2, 3, 3))))


def test_conv_kernel_larger_than_input_rejected():
    with pytest.raises(TensorError, match="larger"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_bn_eval_constant_channel_gives_zero():
    x = Tensor(np.full((2, 1, 3, 3), 4.0))
    out = batch_norm2d(
        x, Tensor(np.ones(1)), Tensor(np.zeros(1)), Tensor(np.full(1, 4.0)), Tensor(np.ones(1)), mode="eval"
    )
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_bn_zero_gamma_returns_beta(rng):
    x = Tensor(rng.standard_normal((3, 2, 4, 4)))
    beta = np.array([0.7, -1.2])
    out = batch_norm2d(x, Tensor(np.zeros(2)), Tensor(beta), Tensor(np.zeros(2)), Tensor(np.ones(2)), mode="train")
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))


def test_bn_running_stat_update():
    x = Tensor(np.array([-1.0, 1.0]).reshape(2, 1, 1, 1))
    rm, rv = Tensor(np.zeros(1)), Tensor(np.full(1, 3.0))
    batch_norm2d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, mode="train", momentum=0.1)
    # mean 0; unbiased variance of [-1, 1] is 2
    assert rm.data[0] == pytest.approx(0.0)
    assert rv.data[0] == pytest.approx(0.1 * 2 + 0.9 * 3.0)


def test_bn_eval_leaves_running_stats():
    rm, rv = Tensor(np.array([0.3])), Tensor(np.array([2.0]))
    batch_norm2d(Tensor(np.ones((2, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), rm, rv, mode="eval")
    assert rm.data[0] == 0.3 and rv.data[0] == 2.0


def test_bn_train_single_element_rejected():
    with pytest.raises(TensorError, match="variance"):
        batch_norm2d(
            Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)),
            Tensor(np.zeros(1)), Tensor(np.ones(1)), mode="train",
        )


def test_relu_and_sigmoid_values():
    np.testing.assert_array_equal(elementwise(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0.0, 0.0, 2.0])
    assert sigmoid(Tensor([0.0])).data[0] == 0.5
    assert sigmoid(Tensor([math.log(3.0)])).data[0] == pytest.approx(0.75, abs=1e-15)


def test_sigmoid_extreme_inputs_finite():
    s = sigmoid(Tensor([-1000.0, 1000.0])).data
    assert np.all(np.isfinite(s)) and s[0] == 0.0 and s[1] == 1.0


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(relu(x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_pool_examples():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    assert pool2d(x, "max", 2, 2).data.item() == 4.0
    assert pool2d(x, "avg", 2, 2).data.item() == 2.5
    c = Tensor(np.full((2, 3, 4, 5), 1.25))
    out = pool2d(c, "global_avg")
    assert out.shape == (2, 3, 1, 1)
    np.testing.assert_array_equal(out.data, 1.25)


def test_pool_kernel_too_large():
    with pytest.raises(TensorError):
        max_pool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 1)


def test_max_pool_routes_gradient_to_argmax():
    x = Tensor(np.array([[1.0, 2.0], [4.0, 3.0]]).reshape(1, 1, 2, 2), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(max_pool2d(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad[0, 0], [[0.0, 0.0], [1.0, 0.0]])


def test_avg_pool_spreads_gradient():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(avg_pool2d(x, 2, 2))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 0.25))


def test_concat_and_slice_round_trip(rng):
    a = Tensor(rng.standard_normal((2, 3, 4, 4)))
    b = Tensor(rng.standard_normal((2, 5, 4, 4)))
    out = concat_channels([a, b])
    assert out.shape == (2, 8, 4, 4)
    np.testing.assert_array_equal(slice_channels(out, 0, 3).data, a.data)
    np.testing.assert_array_equal(slice_channels(out, 3, 8).data, b.data)
    np.testing.assert_array_equal(concat_channels([a]).data, a.data)


def test_concat_mismatched_spatial_rejected():
    with pytest.raises(TensorError, match="mismatched"):
        concat_channels([Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 2)))])


def test_linear_identity(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(linear(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    with pytest.raises(TensorError):
        linear(Tensor(x), Tensor(np.eye(2)))


def test_weighted_bce_value_and_validation():
    p = Tensor(np.array([[0.8], [0.4]]))
    t = Tensor(np.array([[1.0], [0.0]]))
    expected = -(2.0 * math.log(0.8) + 0.5 * math.log(0.6)) / 2
    assert weighted_bce(p, t, 2.0, 0.5).item() == pytest.approx(expected, rel=1e-12)
    with pytest.raises(TensorError):
        weighted_bce(p, Tensor(np.array([[0.5], [0.0]])))
    with pytest.raises(TensorError):
        weighted_bce(p, t, pos_weight=0.0)


def test_weighted_bce_clamps_saturated_probabilities():
    loss = weighted_bce(Tensor(np.array([[0.0], [1.0]])), Tensor(np.array([[1.0], [0.0]])))
    assert np.isfinite(loss.item())


def test_mixed_precision_rejected():
    with pytest.raises(TensorError, match="precision"):
        add(Tensor(np.ones(2), dtype="single"), Tensor(np.ones(2), dtype="double"))


def test_shared_input_gradients_accumulate():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = sum_all(mul(x, x))
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_non_scalar_backward_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(TensorError):
        tape.backward(y)


def test_permute_inverse(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    y = permute(permute(Tensor(x), (1, 0, 2, 3)), (1, 0, 2, 3))
    np.testing.assert_array_equal(y.data, x)


def test_ops_outside_tape_record_nothing():
    w = Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
    out = conv2d(Tensor(np.ones((1, 1, 2, 2))), w)
    assert not out.requires_grad


@pytest.mark.parametrize("name", sorted(standard_cases(0)))
def test_gradcheck_each_op(name):
    fn, inputs = standard_cases(0)[name]
    assert grad_check(fn, inputs, eps=1e-5) < 1e-6


def test_gradcheck_flags_a_wrong_gradient():
    from murax.autograd import ops

    def bad_square(x):
        out = ops._wrap(x.data ** 2)
        tape = ops.tracking(x)
        if tape is not None:
            tape.record(out, (x,), lambda g: (g * x.data,))  # should be 2·x
        return sum_all(out)

    x = Tensor(np.array([1.5, -0.7]), requires_grad=True)
    assert grad_check(bad_square, [x]) > 0.1
