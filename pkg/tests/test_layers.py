import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from _cases import analytic_gradients, fd_gradient, gradient_check, loss_of, mini_model
from abcnet.approx import WeightBaseSet
from abcnet.layers import (BatchNorm, Conv2D, Dense, MaxPool2D, MissingCacheError, MultiActivation,
                           softmax_cross_entropy)
from abcnet.model import Model
from abcnet.tensor import ShapeError, conv2d_ref, make_rng


def _fd_layer_input(layer, x, gout):
    return fd_gradient(lambda: float((layer.forward(x, training=True) * gout).sum()), x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_fp_gradients(stride, padding):
    rng = make_rng(0)
    layer = Conv2D(2, 3, 3, stride, padding, rng=rng, dtype=np.float64)
    x = rng.normal(size=(2, 2, 6, 6))
    out = layer.forward(x, training=True)
    np.testing.assert_allclose(out, conv2d_ref(x, layer.W, stride, padding), rtol=1e-12)
    gout = rng.normal(size=out.shape)
    gx = layer.backward(gout)
    np.testing.assert_allclose(gx, _fd_layer_input(layer, x, gout), rtol=1e-6, atol=1e-8)
    layer.forward(x, training=True)
    layer.backward(gout)
    gw = fd_gradient(lambda: float((layer.forward(x, training=True) * gout).sum()), layer.W)
    np.testing.assert_allclose(layer.grads["W"], gw, rtol=1e-6, atol=1e-8)


def test_conv_binary_m1_alpha1_is_plain_gradient():
    rng = make_rng(1)
    layer = Conv2D(2, 3, 3, M=1, rng=rng, dtype=np.float64)
    B = np.where(rng.random((1, 3, 2, 3, 3)) < 0.5, -1, 1).astype(np.int8)
    layer.base_set = WeightBaseSet(B, np.ones(1), np.zeros(1))
    layer.freeze_bases = True
    x = rng.normal(size=(2, 2, 5, 5))
    gout = rng.normal(size=(2, 3, 3, 3))
    layer.forward(x, training=True)
    layer.backward(gout)
    plain = Conv2D(2, 3, 3, dtype=np.float64)
    plain.W = B[0].astype(np.float64)
    plain.forward(x, training=True)
    plain.backward(gout)
    np.testing.assert_allclose(layer.grads["W"], plain.grads["W"], rtol=1e-12)


def test_conv_binary_forward_uses_refit_bases():
    rng = make_rng(2)
    layer = Conv2D(2, 4, 3, padding=1, M=3, rng=rng, dtype=np.float64)
    x = rng.normal(size=(1, 2, 5, 5))
    out = layer.forward(x)
    bs = layer.base_set
    ref = sum(a * conv2d_ref(x, b.astype(float), 1, 1) for a, b in zip(bs.alphas, bs.bases))
    np.testing.assert_allclose(out, ref, rtol=1e-10, atol=1e-12)


def test_conv_shape_error_and_missing_cache():
    layer = Conv2D(2, 3, 3)
    with pytest.raises(ShapeError):
        layer.forward(np.zeros((1, 3, 5, 5)))
    with pytest.raises(MissingCacheError):
        layer.backward(np.zeros((1, 3, 3, 3)))


def test_maxpool_forward_backward():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    pool = MaxPool2D(2)
    out = pool.forward(x, training=True)
    assert out.ravel().tolist() == [5, 7, 13, 15]
    g = pool.backward(np.ones((1, 1, 2, 2)))
    assert g.sum() == 4 and g[0, 0, 1, 1] == 1 and g[0, 0, 0, 0] == 0


def test_batchnorm_training_normalises():
    rng = make_rng(3)
    bn = BatchNorm(3, dtype=np.float64)
    x = rng.normal(5.0, 3.0, size=(16, 3, 4, 4))
    out = bn.forward(x, training=True)
    assert np.abs(out.mean(axis=(0, 2, 3))).max() < 1e-5
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, rtol=1e-3)
    assert np.all(bn.running_var > 0)


def test_batchnorm_gradients():
    rng = make_rng(4)
    bn = BatchNorm(2, dtype=np.float64)
    bn.gamma, bn.bias = rng.uniform(0.5, 2, 2), rng.normal(size=2)
    x = rng.normal(size=(4, 2, 3, 3))
    gout = rng.normal(size=x.shape)
    bn.forward(x, training=True)
    gx = bn.backward(gout)
    np.testing.assert_allclose(gx, _fd_layer_input(bn, x, gout), rtol=1e-5, atol=1e-8)


def test_batchnorm_eval_is_affine():
    bn = BatchNorm(2, dtype=np.float64)
    bn.running_mean, bn.running_var = np.array([1.0, -2.0]), np.array([4.0, 0.25])
    bn.gamma, bn.bias = np.array([2.0, 1.0]), np.array([0.0, 0.5])
    a, b = bn.affine()
    x = make_rng(5).normal(size=(3, 2))
    np.testing.assert_allclose(bn.forward(x), a * x + b, rtol=1e-12)


def test_dense_and_loss_gradients():
    rng = make_rng(6)
    d = Dense(5, 3, rng=rng, dtype=np.float64)
    x, y = rng.normal(size=(4, 5)), np.array([0, 2, 1, 2])

    def loss():
        return softmax_cross_entropy(d.forward(x, training=True), y)[0]

    _, g = softmax_cross_entropy(d.forward(x, training=True), y)
    gx = d.backward(g)
    np.testing.assert_allclose(d.grads["W"], fd_gradient(loss, d.W), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(d.grads["b"], fd_gradient(loss, d.b), rtol=1e-6, atol=1e-9)
    np.testing.assert_allclose(gx, fd_gradient(loss, x), rtol=1e-6, atol=1e-9)


def test_activation_padding_matches_minus_one():
    act = MultiActivation(2, [0.0, 1.0], [0.5, 2.0], out_pad=1)
    out = act.forward(np.zeros((1, 1, 2, 2)))
    assert out.shape == (1, 1, 4, 4) and out[0, 0, 0, 0] == -2.5


def test_relu_mode():
    act = MultiActivation(None)
    x = np.array([[-1.0, 2.0]])
    assert act.forward(x, training=True).tolist() == [[0.0, 2.0]]
    assert act.backward(np.ones_like(x)).tolist() == [[0.0, 1.0]]


@pytest.mark.parametrize("seed", range(3))
def test_exact_path_gradients(seed):
    for name, err in gradient_check(seed).items():
        assert err < 1e-4, name


def test_activation_shift_gradient_follows_window():
    model, x, y = mini_model(1)
    analytic_gradients(model, x, y)
    act = model.layers[2]
    # g_v = beta * sum(g * mask): same window as the input gradient
    assert act.grads["shifts"].shape == (2,)
    assert np.all(np.isfinite(act.grads["shifts"]))


def test_ste_zero_mask_kills_gradient():
    model, x, y = mini_model(2)
    model.layers[1].bias = np.full(3, 100.0)  # every R far outside all windows
    for layer in model.layers:
        if hasattr(layer, "needs_input_grad"):
            layer.needs_input_grad = True
    loss, g = softmax_cross_entropy(model.forward(x, training=True), y)
    gx = model.backward(g)
    assert not model.layers[0].grads["W"].any()
    assert not gx.any()
    assert not model.layers[2].grads["shifts"].any()


def test_fp_block_equals_float_cnn():
    rng = make_rng(7)
    conv, bn, act = Conv2D(1, 2, 3, padding=1, rng=rng, dtype=np.float64), BatchNorm(2, dtype=np.float64), \
        MultiActivation(None, dtype=np.float64)
    x = rng.normal(size=(3, 1, 5, 5))
    out = Model([conv, bn, act]).forward(x)
    a, b = bn.affine()
    ref = np.maximum(a.reshape(1, -1, 1, 1) * conv2d_ref(x, conv.W, 1, 1) + b.reshape(1, -1, 1, 1), 0)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)
