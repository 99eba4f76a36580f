"""Architectures, forward passes and prediction rules."""
import numpy as np
import pytest

from mpmnet import tensor as T
from mpmnet.errors import ConfigError, DimensionError, NumericError, StateError
from mpmnet.mpm import MpmSolution
from mpmnet.network import Model, accuracy, build_arch, init_params, predict, softmax_xent
from mpmnet.tensor import Tensor


def conv(c_out, c_in, k):
    return c_out * c_in * k * k + c_out


def dense(n_in, n_out):
    return n_in * n_out + n_out


# counted by hand from the layer list: 28 -5+1-> 24 -pool-> 12 -5+1-> 8 -pool-> 4
MNIST_BODY = conv(10, 1, 5) + conv(20, 10, 5) + dense(20 * 4 * 4, 50)
# 32 -> 30 -> 28 -pool-> 14 -> 12 -> 10 -pool-> 5
CIFAR_BODY = conv(64, 3, 3) + conv(64, 64, 3) + conv(128, 64, 3) + conv(128, 128, 3) + dense(128 * 5 * 5, 256)


@pytest.mark.parametrize("dataset,head,expected", [
    ("mnist", "softmax-2", MNIST_BODY + dense(50, 2)),
    ("mnist", "mpm-1", MNIST_BODY + 50),
    ("cifar10", "softmax-2", CIFAR_BODY + dense(256, 2)),
    ("cifar10", "mpm-1", CIFAR_BODY + 256),
])
def test_param_counts(dataset, head, expected):
    assert build_arch(dataset, head).param_count() == expected


def test_mnist_counts_literal():
    assert build_arch("mnist", "softmax-2").param_count() == 21432
    assert build_arch("mnist", "mpm-1").param_count() == 21380


def test_unknown_kinds():
    with pytest.raises(ConfigError):
        build_arch("svhn", "mpm-1")
    with pytest.raises(ConfigError):
        build_arch("mnist", "mpm-3")


def test_init_deterministic_and_bounded():
    arch = build_arch("mnist", "mpm-1")
    p1, p2 = init_params(arch, seed=3), init_params(arch, seed=3)
    for k in p1:
        assert np.array_equal(p1[k].data, p2[k].data)
    w = p1["conv2.w"].data
    assert np.abs(w).max() <= np.sqrt(6.0 / (10 * 5 * 5))
    assert np.all(p1["fc1.b"].data == 0)


def test_feature_and_logit_shapes():
    x = np.random.default_rng(0).random((3, 1, 28, 28))
    m = Model.create("mnist", "softmax-2")
    assert m.features(x).shape == (3, 50)
    assert m.softmax_logits(x).shape == (3, 2)
    assert np.all(m.features(x).data >= 0)  # relu output


def test_cifar_forward_shape():
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    assert Model.create("cifar10", "mpm-1").features(x).shape == (2, 256)


def test_wrong_input_shape():
    m = Model.create("mnist", "mpm-1")
    with pytest.raises(DimensionError):
        m.features(np.zeros((2, 3, 32, 32)))


def test_nan_input_names_layer():
    x = np.zeros((1, 1, 28, 28))
    x[0, 0, 5, 5] = np.nan
    with pytest.raises(NumericError, match="conv1"):
        Model.create("mnist", "softmax-2").features(x)


def test_dropout_only_in_train_mode():
    x = np.random.default_rng(1).random((4, 1, 28, 28))
    m = Model.create("mnist", "mpm-1")
    a, b = m.features(x).data, m.features(x).data
    assert np.array_equal(a, b)
    c = m.features(x, train=True, rng=np.random.default_rng(0)).data
    assert not np.array_equal(a, c)


def test_softmax_xent_value():
    z = np.array([[2.0, 0.0], [0.0, 1.0]])
    ref = -np.mean([2 - np.log(np.exp(2) + 1), 1 - np.log(1 + np.exp(1))])
    assert softmax_xent(Tensor(z), np.array([0, 1])).item() == pytest.approx(ref, rel=1e-12)


def test_mpm_predict_rule():
    m = Model.create("mnist", "mpm-1")
    x = np.random.default_rng(2).random((6, 1, 28, 28))
    with pytest.raises(StateError):
        predict(m, x)
    g = m.features(x).data
    a = np.random.default_rng(3).standard_normal(50)
    b = float(np.median(g @ a))
    m.solution = MpmSolution(a, b, 0.5)
    np.testing.assert_array_equal(predict(m, x), np.where(g @ a - b >= 0, 1, -1))


def test_softmax_predict_and_accuracy():
    m = Model.create("mnist", "softmax-2")
    x = np.random.default_rng(4).random((5, 1, 28, 28))
    z = m.softmax_logits(x).data
    pred = predict(m, x)
    np.testing.assert_array_equal(pred, np.where(z[:, 0] >= z[:, 1], 1, -1))
    assert accuracy(m, x, pred) == 100.0
    assert accuracy(m, x, -pred) == 0.0


def test_frozen_view_shares_arrays_without_grads():
    m = Model.create("mnist", "softmax-2")
    f = m.frozen()
    assert f.params["fc1.w"].data is m.params["fc1.w"].data
    x = Tensor(np.random.default_rng(5).random((2, 1, 28, 28)), requires_grad=True)
    T.tsum(f.softmax_logits(x)).backward()
    assert x.grad is not None and f.params["fc1.w"].grad is None


def test_astype_float32():
    m = Model.create("mnist", "softmax-2").astype(np.float32)
    assert m.params["conv1.w"].dtype == np.float32
    assert m.softmax_logits(np.zeros((1, 1, 28, 28), np.float32)).dtype == np.float32
