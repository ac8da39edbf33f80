import numpy as np
import pytest

from utflaw.errors import DivergenceError, ShapeError
from utflaw.nn import SGD, Adam, Conv2D, Dense, Dropout, Flatten, ReLU, Sequential, Softmax, softmax, softmax_cross_entropy, train_step
from utflaw.nn.checkpoint import CheckpointError, dump_checkpoint, load_checkpoint_bytes
from utflaw.nn.gradcheck import check_layer, check_softmax_cross_entropy, relative_error

from conftest import LAYER_CASES, random_instance


def conv_reference(x, kernel, bias, stride):
    """Quadruple-loop valid cross-correlation (oracle)."""
    n, h, w, c = x.shape
    kh, kw, _, f = kernel.shape
    sh, sw = stride
    oh, ow = (h - kh) // sh + 1, (w - kw) // sw + 1
    out = np.zeros((n, oh, ow, f))
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                for k in range(f):
                    patch = x[b, i * sh : i * sh + kh, j * sw : j * sw + kw, :]
                    out[b, i, j, k] = np.sum(patch * kernel[..., k]) + bias[k]
    return out


def built(layer, shape, seed=0):
    layer.build(shape, np.random.default_rng(seed), np.float64)
    return layer


def test_first_conv_shape():
    conv = built(Conv2D(300, (5, 5), (2, 2)), (100, 20, 5))
    assert conv.output_shape == (48, 8, 300)
    assert conv.count_params() == 37_800
    conv2 = built(Conv2D(300, (5, 5), (2, 2)), (48, 8, 300))
    assert conv2.output_shape == (22, 2, 300)
    assert conv2.count_params() == 2_250_300


def test_dense_512_count():
    assert built(Dense(512), (22 * 2 * 300,)).count_params() == 6_758_912


def test_conv_identity_kernel():
    conv = built(Conv2D(3, (1, 1), (1, 1)), (4, 5, 3))
    conv.params["kernel"][...] = np.eye(3).reshape(1, 1, 3, 3)
    x = np.random.default_rng(1).normal(size=(2, 4, 5, 3))
    np.testing.assert_array_equal(conv.forward(x), x)


@pytest.mark.parametrize("stride", [(1, 1), (2, 2), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride):
    rng = np.random.default_rng(7)
    conv = built(Conv2D(4, (3, 2), stride), (7, 6, 2), seed=3)
    conv.params["bias"][...] = rng.normal(size=4)
    x = rng.normal(size=(3, 7, 6, 2))
    out = conv.forward(x)
    ref = conv_reference(x, conv.params["kernel"], conv.params["bias"], stride)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        built(Conv2D(2, (5, 5)), (4, 8, 1))


def test_backward_shape_mismatch():
    conv = built(Conv2D(2, (3, 3), (1, 1)), (5, 5, 1))
    conv.forward(np.zeros((1, 5, 5, 1)))
    with pytest.raises(ShapeError):
        conv.backward(np.zeros((1, 2, 2, 2)))


@pytest.mark.parametrize("kind", LAYER_CASES)
def test_gradients_random_instances(kind):
    rng = np.random.default_rng(hash(kind) % 2**32)
    for trial in range(10):
        layer, x, up = random_instance(kind, rng)
        errors = check_layer(layer, x, up, seed=trial)
        assert max(errors.values()) <= 1e-4, (kind, trial, errors)


def test_softmax_xent_gradient_closed_form():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(5, 2))
    y = rng.integers(0, 2, 5)
    _, grad = softmax_cross_entropy(z, y)
    np.testing.assert_allclose(grad * 5, softmax(z) - np.eye(2)[y])
    assert check_softmax_cross_entropy(z, y) <= 1e-4


def test_relu_zero_input_has_zero_gradient():
    relu = built(ReLU(), (4,))
    relu.forward(np.zeros((2, 4)))
    assert not relu.backward(np.ones((2, 4))).any()


def test_relative_error_floor():
    assert relative_error([1e-12], [0.0]) < 1e-5
    assert relative_error([1.0], [1.0 + 1e-3]) == pytest.approx(1e-3 / 1.001)


def test_softmax_properties():
    z = np.random.default_rng(0).normal(scale=5, size=(100, 2))
    p = softmax(z)
    assert np.allclose(p.sum(axis=1), 1, atol=1e-6)
    assert ((p > 0) & (p < 1)).all()
    np.testing.assert_allclose(softmax(z + 7.5), p)


def test_dropout_identity_cases():
    x = np.random.default_rng(0).normal(size=(3, 8))
    d = built(Dropout(0.5), (8,))
    np.testing.assert_array_equal(d.forward(x, training=False), x)
    d0 = built(Dropout(0.0), (8,))
    np.testing.assert_array_equal(d0.forward(x, training=True, rng=np.random.default_rng(0)), x)
    with pytest.raises(ShapeError):
        Dropout(1.0)


def _mlp(seed=0, dropout=0.0):
    layers = [Flatten(), Dense(8), ReLU()]
    if dropout:
        layers.append(Dropout(dropout))
    layers += [Dense(2), Softmax()]
    return Sequential(layers, (3, 2, 1), seed=seed)


def _toy(n=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, 3, 2, 1)) * 0.3
    x[:, 0, 0, 0] += np.where(y == 1, 2.0, -2.0)
    return x, y


def test_l2_zero_is_plain_cross_entropy():
    m = _mlp()
    x, y = _toy()
    loss = m.loss_and_grads(x, y, l2=0.0)
    assert loss == softmax_cross_entropy(m.logits(x), y)[0]
    with_l2 = m.loss_and_grads(x, y, l2=0.01)
    kernels = sum(float(np.sum(l.params["kernel"] ** 2)) for l in m.layers if "kernel" in l.params)
    assert with_l2 == pytest.approx(loss + 0.01 * kernels)


def test_model_gradient_with_l2():
    m = _mlp(seed=4)
    x, y = _toy(6, seed=4)
    m.loss_and_grads(x, y, l2=0.05)
    analytic = [g.copy() for g in m.grad_arrays()]
    from utflaw.nn.gradcheck import numeric_gradient

    for p, g in zip(m.param_arrays(), analytic):
        numeric = numeric_gradient(lambda: m.loss_and_grads(x, y, l2=0.05), p)
        assert relative_error(g, numeric) <= 1e-4


@pytest.mark.parametrize("opt", [SGD(0.0), Adam(0.0)])
def test_zero_learning_rate_leaves_parameters(opt):
    m = _mlp(dropout=0.5)
    before = m.get_weights()
    x, y = _toy()
    for s in range(3):
        train_step(m, opt, x, y, l2=1e-3, rng=np.random.default_rng(s), step=s)
    for a, b in zip(before, m.get_weights()):
        np.testing.assert_array_equal(a, b)


def test_toy_fit_converges():
    m = _mlp(seed=1)
    opt = Adam(1e-2)
    x, y = _toy()
    losses = [train_step(m, opt, x, y, rng=np.random.default_rng(0), step=s) for s in range(200)]
    assert losses[-1] < 0.01
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_training_is_bit_deterministic():
    def run():
        m = _mlp(seed=3, dropout=0.3)
        opt = Adam(1e-2)
        x, y = _toy()
        for s in range(20):
            train_step(m, opt, x, y, l2=1e-4, rng=np.random.default_rng([9, s]), step=s)
        return m.get_weights()

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_divergence_reports_layer_and_step():
    m = _mlp()
    m.layers[1].params["kernel"][0, 0] = np.inf
    x, y = _toy()
    with pytest.raises(DivergenceError) as info:
        train_step(m, SGD(0.1), x, y, step=17)
    assert info.value.step == 17 and "Dense" in info.value.layer


def test_checkpoint_roundtrip_byte_stable():
    m = Sequential([Conv2D(2, (3, 3), (2, 2)), ReLU(), Flatten(), Dense(3), Dropout(0.25), Dense(2), Softmax()], (7, 7, 2), seed=5)
    data = dump_checkpoint(m, {"b": 1, "a": [1, 2]}, {"x": np.arange(3.0)})
    assert data == dump_checkpoint(m, {"a": [1, 2], "b": 1}, {"x": np.arange(3.0)})
    back, meta, extras = load_checkpoint_bytes(data)
    assert back.specs() == m.specs() and meta == {"a": [1, 2], "b": 1}
    np.testing.assert_array_equal(extras["x"], np.arange(3.0))
    x = np.random.default_rng(0).random((4, 7, 7, 2))
    np.testing.assert_array_equal(back.predict_proba(x), m.predict_proba(x))
    assert data[:4] == b"UTCK"
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint_bytes(data[:40])
