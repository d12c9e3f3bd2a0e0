import numpy as np
import pytest

from bitswitcher.errors import DimensionError, DomainError, NumericalError, PreconditionError
from bitswitcher.tensor import (
    BNState, Parameter, RngStreams, batchnorm_backward, batchnorm_forward, check_finite, conv2d_backward,
    conv2d_forward, conv_output_size, cosine_lr, finite_difference_check, fully_connected_backward,
    fully_connected_forward, kl_divergence, sgd_step, softmax, softmax_cross_entropy,
)

GRAD_TOLERANCE = 1e-4


def naive_conv(x, w, stride, pad):
    x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, _, h, wd = x.shape
    o, _, k, _ = w.shape
    h_out, w_out = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, o, h_out, w_out))
    for i in range(h_out):
        for j in range(w_out):
            patch = x[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.tensordot(patch, w, axes=([1, 2, 3], [1, 2, 3]))
    return out


def test_conv_output_size():
    assert conv_output_size(28, 3, 1, 1) == 28
    assert conv_output_size(28, 3, 2, 1) == 14
    assert conv_output_size(14, 3, 2, 1) == 7
    with pytest.raises(DimensionError):
        conv_output_size(1, 5, 1, 0)


def test_conv_matches_naive_loop(rng):
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    for stride in (1, 2):
        out, _ = conv2d_forward(x, w, stride, 1)
        np.testing.assert_allclose(out, naive_conv(x, w, stride, 1), rtol=1e-10, atol=1e-10)


def test_conv_matches_naive_loop_on_random_shapes():
    rng = np.random.default_rng(21)
    for _ in range(100):
        n, c_in, c_out = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 3, 5]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 3))
        h, w = rng.integers(max(1, k - 2 * pad), 9, size=2)
        x = rng.standard_normal((n, c_in, h, w))
        weight = rng.standard_normal((c_out, c_in, k, k))
        out, _ = conv2d_forward(x, weight, stride, pad)
        np.testing.assert_allclose(out, naive_conv(x, weight, stride, pad), rtol=1e-5, atol=1e-12,
                                   err_msg=f"x {x.shape}, w {weight.shape}, stride {stride}, pad {pad}")


def test_conv_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        conv2d_forward(rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 3, 3, 3)), 1, 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(rng, stride):
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    upstream = rng.standard_normal(conv2d_forward(x, w, stride, 1)[0].shape)

    def loss_x(v):
        return float((conv2d_forward(v, w, stride, 1)[0] * upstream).sum())

    def grad_x(v):
        _, cache = conv2d_forward(v, w, stride, 1)
        return conv2d_backward(upstream, cache)[0]

    def loss_w(v):
        return float((conv2d_forward(x, v, stride, 1)[0] * upstream).sum())

    def grad_w(v):
        _, cache = conv2d_forward(x, v, stride, 1)
        return conv2d_backward(upstream, cache)[1]

    assert finite_difference_check(loss_x, grad_x, x) < GRAD_TOLERANCE
    assert finite_difference_check(loss_w, grad_w, w) < GRAD_TOLERANCE


def _bn_state(channels):
    state = BNState.create(channels, np.float64)
    state.gamma.value[...] = np.linspace(0.5, 1.5, channels)
    state.beta.value[...] = np.linspace(-0.2, 0.2, channels)
    return state


def test_batchnorm_gradients(rng):
    x = rng.standard_normal((4, 3, 2, 2))
    upstream = rng.standard_normal(x.shape)

    def loss(v):
        return float((batchnorm_forward(v, _bn_state(3), "train", track_stats=False)[0] * upstream).sum())

    def grad(v):
        _, cache = batchnorm_forward(v, _bn_state(3), "train", track_stats=False)
        return batchnorm_backward(upstream, cache)[0]

    assert finite_difference_check(loss, grad, x) < GRAD_TOLERANCE


def test_batchnorm_train_then_eval_agree_with_full_momentum(rng):
    state = _bn_state(3)
    state.momentum = 1.0
    x = rng.standard_normal((8, 3, 4, 4))
    train_out, _ = batchnorm_forward(x, state, "train")
    eval_out, _ = batchnorm_forward(x, state, "eval")
    np.testing.assert_allclose(train_out, eval_out, rtol=1e-10, atol=1e-10)
    assert state.updates == 1


def test_batchnorm_without_tracking_leaves_running_stats(rng):
    state = _bn_state(2)
    batchnorm_forward(rng.standard_normal((4, 2)), state, "train", track_stats=False)
    np.testing.assert_array_equal(state.running_mean, np.zeros(2))
    np.testing.assert_array_equal(state.running_var, np.ones(2))
    assert state.updates == 0


def test_batchnorm_empty_batch():
    with pytest.raises(PreconditionError):
        batchnorm_forward(np.zeros((0, 2)), _bn_state(2), "train")


def test_fully_connected_gradients(rng):
    x = rng.standard_normal((3, 4))
    w = rng.standard_normal((2, 4))
    b = rng.standard_normal(2)
    upstream = rng.standard_normal((3, 2))

    def loss(v):
        return float((fully_connected_forward(x, v, b)[0] * upstream).sum())

    def grad(v):
        _, cache = fully_connected_forward(x, v, b)
        return fully_connected_backward(upstream, cache)[1]

    assert finite_difference_check(loss, grad, w) < GRAD_TOLERANCE


def test_cross_entropy_gradient(rng):
    logits = rng.standard_normal((5, 4))
    labels = np.array([0, 1, 2, 3, 1])
    assert finite_difference_check(lambda v: softmax_cross_entropy(v, labels)[0],
                                   lambda v: softmax_cross_entropy(v, labels)[1], logits) < GRAD_TOLERANCE


def test_cross_entropy_of_uniform_logits():
    loss, _ = softmax_cross_entropy(np.zeros((2, 4)), np.array([0, 3]))
    assert loss == pytest.approx(np.log(4))


@pytest.mark.parametrize("temperature", [1.0, 2.0])
def test_kl_divergence_gradient(rng, temperature):
    teacher = softmax(rng.standard_normal((4, 3)))
    student = rng.standard_normal((4, 3))
    assert finite_difference_check(lambda v: kl_divergence(teacher, v, temperature)[0],
                                   lambda v: kl_divergence(teacher, v, temperature)[1], student) < GRAD_TOLERANCE


def test_kl_divergence_of_identical_distributions_is_zero(rng):
    logits = rng.standard_normal((3, 5))
    loss, grad = kl_divergence(softmax(logits), logits)
    assert loss == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_kl_divergence_rejects_unnormalized_teacher():
    with pytest.raises(DomainError):
        kl_divergence(np.full((1, 3), 0.5), np.zeros((1, 3)))


def test_sgd_step_momentum_decay_and_floor():
    weight = Parameter(np.array([1.0]), "w")
    step = Parameter(np.array(1e-3), "s", decay=False, floor=1e-9)
    weight.grad[...] = 1.0
    step.grad[...] = 1.0
    sgd_step([weight, step], lr=0.1, momentum=0.9, weight_decay=0.5)
    # 1 - 0.1 * (1 + 0.5 * 1)
    assert weight.value[0] == pytest.approx(0.85)
    assert float(step.value) == pytest.approx(1e-9)
    sgd_step([weight], lr=0.1, momentum=0.9, weight_decay=0.0)
    # buffer 0.9 * 1.5 + 1
    assert weight.value[0] == pytest.approx(0.85 - 0.1 * 2.35)


def test_sgd_rejects_nonfinite_result():
    p = Parameter(np.array([1.0]), "w")
    p.grad[...] = np.inf
    with pytest.raises(NumericalError):
        sgd_step([p], lr=0.1, momentum=0.0)


def test_check_finite():
    with pytest.raises(NumericalError):
        check_finite(np.array([0.0, np.nan]), "sample")


def test_cosine_lr_endpoints():
    assert cosine_lr(0, 100, 0.02) == pytest.approx(0.02)
    assert cosine_lr(50, 100, 0.02) == pytest.approx(0.01)
    assert cosine_lr(100, 100, 0.02) == pytest.approx(0.0, abs=1e-12)


def test_rng_streams_are_reproducible_and_independent():
    a, b = RngStreams(3), RngStreams(3)
    b.get("shuffle").random(10)
    np.testing.assert_array_equal(a.get("init").random(5), b.get("init").random(5))
    assert not np.array_equal(RngStreams(3).get("init").random(5), RngStreams(3).get("data").random(5))
    with pytest.raises(DomainError):
        a.get("nope")
