import numpy as np
import pytest

from core.errors import ConfigError, ShapeMismatchError, ValidationError
from services.layers import (Adam, BatchNorm2d, Conv2d, Dropout, Flatten, Linear, MaxPool2d, ReduceLROnPlateau,
                             ReLU, Sequential, build_layer, cross_entropy_loss, mse_loss, softmax)

DELTA = 1e-4
TOLERANCE = 1e-6


def numeric_grad(f, x):
    """Central differences of the scalar function f() with respect to array x (perturbed in place)."""
    grad = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + DELTA
        plus = f()
        x.flat[i] = orig - DELTA
        minus = f()
        x.flat[i] = orig
        grad.flat[i] = (plus - minus) / (2 * DELTA)
    return grad


def rel_error(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12)


def check_layer(layer, x, rng):
    """Compares backward() against finite differences for the input and every parameter."""
    g = rng.standard_normal(layer.forward(x).shape)

    def loss():
        return float(np.sum(layer.forward(x) * g))

    layer.zero_grad()
    layer.forward(x)
    dx = layer.backward(g)
    assert rel_error(dx, numeric_grad(loss, x)) < TOLERANCE
    analytic = {name: layer.grads[name].copy() for name in layer.params}
    for name, value in layer.params.items():
        assert rel_error(analytic[name], numeric_grad(loss, value)) < TOLERANCE, name


def test_conv2d_gradients(rng):
    check_layer(Conv2d(2, 3, kernel=3, rng=rng), rng.standard_normal((2, 2, 5, 6)), rng)


def test_strided_conv2d_gradients(rng):
    check_layer(Conv2d(1, 2, kernel=3, stride=2, padding=1, rng=rng), rng.standard_normal((2, 1, 7, 7)), rng)


def test_batchnorm_training_gradients(rng):
    bn = BatchNorm2d(3)
    bn.params["gamma"] = rng.uniform(0.5, 1.5, 3)
    bn.params["beta"] = rng.standard_normal(3)
    check_layer(bn, rng.standard_normal((4, 3, 2, 3)), rng)


def test_batchnorm_frozen_gradients(rng):
    bn = BatchNorm2d(2)
    bn.buffers["running_mean"] = rng.standard_normal(2)
    bn.buffers["running_var"] = rng.uniform(0.5, 2.0, 2)
    bn.freeze_stats = True
    check_layer(bn, rng.standard_normal((3, 2, 2, 2)), rng)


def test_relu_gradients(rng):
    x = rng.standard_normal((2, 3, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    check_layer(ReLU(), x, rng)


def test_maxpool_gradients(rng):
    x = rng.permutation(2 * 2 * 5 * 4).astype(float).reshape(2, 2, 5, 4) * 0.1
    check_layer(MaxPool2d(2), x, rng)


def test_maxpool_drops_partial_windows(rng):
    pool = MaxPool2d(2)
    x = rng.standard_normal((1, 1, 5, 5))
    assert pool.forward(x).shape == (1, 1, 2, 2)
    dx = pool.backward(np.ones((1, 1, 2, 2)))
    assert dx.sum() == 4.0
    assert np.all(dx[:, :, 4, :] == 0) and np.all(dx[:, :, :, 4] == 0)


def test_linear_and_flatten_gradients(rng):
    check_layer(Linear(6, 4, rng=rng), rng.standard_normal((3, 6)), rng)
    check_layer(Flatten(), rng.standard_normal((2, 3, 2, 2)), rng)


def test_dropout_fixed_mask_gradients(rng):
    layer = Dropout(0.5)
    x = rng.standard_normal((4, 5))
    layer.fixed_mask = rng.random(x.shape) >= 0.5
    check_layer(layer, x, rng)
    layer.training = False
    np.testing.assert_array_equal(layer.forward(x), x)


def test_loss_gradients(rng):
    pred, target = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
    _, grad = mse_loss(pred, target)
    assert rel_error(grad, numeric_grad(lambda: mse_loss(pred, target)[0], pred)) < TOLERANCE

    logits, labels = rng.standard_normal((5, 4)), np.array([0, 3, 1, 1, 2])
    _, grad = cross_entropy_loss(logits, labels)
    assert rel_error(grad, numeric_grad(lambda: cross_entropy_loss(logits, labels)[0], logits)) < TOLERANCE


def test_tiny_cnn_end_to_end_gradients(rng):
    net = Sequential([Conv2d(1, 2, rng=rng), BatchNorm2d(2), ReLU(), MaxPool2d(2), Flatten(),
                      Linear(2 * 2 * 3, 3, rng=rng)])
    x = rng.standard_normal((3, 1, 4, 6))
    labels = np.array([0, 2, 1])

    def loss():
        return cross_entropy_loss(net.forward(x), labels)[0]

    net.train()
    net.zero_grad()
    _, grad = cross_entropy_loss(net.forward(x), labels)
    dx = net.backward(grad)
    assert rel_error(dx, numeric_grad(loss, x)) < TOLERANCE
    for layer, name in net.parameters():
        assert rel_error(layer.grads[name], numeric_grad(loss, layer.params[name])) < TOLERANCE


def test_batchnorm_running_stats_and_single_sample(rng):
    bn = BatchNorm2d(2)
    x = rng.standard_normal((4, 2, 3, 3)) + 5.0
    bn.forward(x)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * x.mean(axis=(0, 2, 3)))
    m = 4 * 3 * 3
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    with pytest.raises(ValidationError):
        bn.forward(x[:1])
    bn.training = False
    assert bn.forward(x[:1]).shape == (1, 2, 3, 3)


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.standard_normal((3, 5)) * 50)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)


def test_shape_errors(rng):
    with pytest.raises(ShapeMismatchError):
        Conv2d(2, 3).forward(rng.standard_normal((1, 1, 4, 4)))
    with pytest.raises(ShapeMismatchError):
        Linear(3, 2).forward(rng.standard_normal((2, 4)))
    with pytest.raises(ShapeMismatchError):
        mse_loss(np.zeros(3), np.zeros(4))


def test_build_layer_round_trip():
    for layer in (Conv2d(1, 4, kernel=5, stride=2), BatchNorm2d(4, momentum=0.2), MaxPool2d(3), Linear(8, 2),
                  Dropout(0.25), ReLU(), Flatten()):
        rebuilt = build_layer(layer.descriptor())
        assert type(rebuilt) is type(layer)
        assert rebuilt.descriptor() == layer.descriptor()
    with pytest.raises(ConfigError):
        build_layer({"kind": "transformer"})


def test_adam_first_step_moves_by_lr():
    layer = Linear(2, 1)
    before = layer.params["weight"].copy()
    layer.grads["weight"] = np.array([[3.0], [-0.5]])
    layer.grads["bias"] = np.zeros(1)
    Adam([(layer, "weight"), (layer, "bias")], lr=0.01).step()
    np.testing.assert_allclose(layer.params["weight"] - before, [[-0.01], [0.01]], rtol=1e-6)


def test_reduce_lr_on_plateau():
    layer = Linear(1, 1)
    opt = Adam([(layer, "weight")], lr=1e-3)
    sched = ReduceLROnPlateau(opt, factor=0.1, patience=2)
    assert [sched.step(1.0) for _ in range(4)] == [False, False, False, True]
    assert opt.lr == pytest.approx(1e-4)
    assert sched.step(0.5) is False
