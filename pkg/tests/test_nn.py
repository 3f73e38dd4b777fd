import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ismsdae.errors import FormatError, ParameterError
from ismsdae.nn import (
    DenseLayer,
    DenseNetwork,
    OptimizerState,
    SparsityConfig,
    TrainConfig,
    apply_dropout,
    backward,
    count_params,
    dae_objective,
    flat_grads,
    forward,
    kl_sparsity,
    load_model,
    mean_activation,
    model_bytes,
    mse_grad,
    mse_loss,
    optimize_step,
    save_model,
    softmax_cross_entropy,
)
from ismsdae.sdae import REFERENCE_FC_DIMS
from ismsdae.selftest import fd_max_rel_error, kl_reference, random_dae


def net_of(dims, hidden, out, seed=0):
    return DenseNetwork.build(dims, hidden, out, np.random.default_rng(seed))


# --- forward ----------------------------------------------------------------

def test_forward_examples():
    ident = DenseNetwork([DenseLayer(np.eye(3), np.zeros(3), "linear")])
    x = np.array([1.0, -2.0, 3.5])
    np.testing.assert_array_equal(forward(ident, x).output, x)
    zero = DenseNetwork([DenseLayer(np.zeros((4, 3)), np.zeros(4), "sigmoid")])
    np.testing.assert_array_equal(forward(zero, x).output, 0.5)
    soft = net_of((3, 5), "relu", "softmax")
    s = forward(soft, np.random.default_rng(0).normal(size=(10, 3)) * 100).output
    np.testing.assert_allclose(s.sum(axis=1), 1, atol=1e-9)
    assert np.all(s > 0)


def test_forward_returns_all_activations():
    net = net_of((6, 5, 4, 3), "sigmoid", "softmax")
    tr = forward(net, np.ones((2, 6)))
    assert [a.shape for a in tr.activations] == [(2, 6), (2, 5), (2, 4), (2, 3)]


def test_forward_dimension_errors():
    net = net_of((4, 2), "relu", "linear")
    with pytest.raises(ParameterError):
        forward(net, np.ones(5))
    with pytest.raises(ParameterError):
        DenseNetwork([DenseLayer.init(3, 4, "relu", np.random.default_rng(0)),
                      DenseLayer.init(5, 2, "relu", np.random.default_rng(0))])
    with pytest.raises(ParameterError):
        DenseLayer(np.ones((2, 2)), np.ones(3))
    with pytest.raises(ParameterError):
        DenseLayer(np.full((2, 2), np.nan), np.ones(2))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(1, 1e3))
def test_softmax_sums_to_one(seed, scale):
    net = net_of((5, 4), "relu", "softmax", seed)
    s = forward(net, np.random.default_rng(seed).normal(size=(16, 5)) * scale).output
    assert np.max(np.abs(s.sum(axis=1) - 1)) < 1e-9
    assert np.all(s > 0) or scale > 100  # extreme logits may underflow to exactly 0


# --- losses -----------------------------------------------------------------

def test_mse_examples(rng):
    assert mse_loss([1.0, 2.0], [1.0, 2.0]) == 0
    assert mse_loss([0.0, 0.0], [3.0, 4.0]) == 25
    o, t = rng.normal(size=37), rng.normal(size=37)
    brute = 0.0
    for a, b in zip(o, t):
        brute += (a - b) ** 2
    assert mse_loss(o, t) == pytest.approx(brute, abs=1e-12)
    assert mse_loss(np.stack([o, t]), np.stack([t, t])) == pytest.approx(brute / 2, abs=1e-12)
    with pytest.raises(ParameterError):
        mse_loss([1.0], [1.0, 2.0])


def test_kl_examples():
    assert kl_sparsity(0.3, [0.3, 0.3, 0.3]) == 0
    # frozen from a 30-digit evaluation of 0.1 ln(0.1/0.5) + 0.9 ln(0.9/0.5)
    assert kl_sparsity(0.1, [0.5]) == pytest.approx(0.368064207168497069910682093234, rel=1e-12)
    assert kl_sparsity(0.1, [0.5] * 7) == pytest.approx(7 * kl_sparsity(0.1, [0.5]), rel=1e-14)
    with pytest.raises(ParameterError):
        kl_sparsity(1.0, [0.5])


def test_kl_clamps_extremes():
    v = kl_sparsity(0.1, [0.0, 1.0])
    assert np.isfinite(v)
    assert v == pytest.approx(kl_sparsity(0.1, [1e-7, 1 - 1e-7]))


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 0.99), st.lists(st.floats(0.001, 0.999), min_size=1, max_size=8))
def test_kl_matches_high_precision(rho, rho_hat):
    ref = float(kl_reference(rho, rho_hat))
    got = kl_sparsity(rho, rho_hat)
    assert got >= 0
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-15)


def test_mean_activation_examples():
    np.testing.assert_array_equal(mean_activation([[0.2, 0.7]]), [0.2, 0.7])
    np.testing.assert_array_equal(mean_activation(np.full((5, 3), 0.4)), [0.4] * 3)
    alt = np.tile([[0.0, 1.0], [1.0, 0.0]], (3, 1))
    np.testing.assert_array_equal(mean_activation(alt), [0.5, 0.5])
    with pytest.raises(ParameterError):
        mean_activation(np.zeros((0, 3)))


def test_softmax_cross_entropy_examples():
    loss, g = softmax_cross_entropy(np.zeros(4), 1)
    assert loss == pytest.approx(1.3862943611198906, rel=1e-15)
    np.testing.assert_allclose(g, [0.25, -0.75, 0.25, 0.25])
    loss, g = softmax_cross_entropy(np.array([0, 0, 1000.0, 0]), 2)
    assert loss == pytest.approx(0, abs=1e-300) and np.all(np.isfinite(g))
    with pytest.raises(ParameterError):
        softmax_cross_entropy(np.zeros(4), 4)


def test_softmax_cross_entropy_gradient(rng):
    for _ in range(5):
        z = rng.normal(size=4) * 3
        _, g = softmax_cross_entropy(z, 3)
        assert fd_max_rel_error(lambda: softmax_cross_entropy(z, 3)[0], [z], [g]) < 1e-6
    z = rng.normal(size=(6, 4))
    y = rng.integers(0, 4, 6)
    _, g = softmax_cross_entropy(z, y)
    assert fd_max_rel_error(lambda: softmax_cross_entropy(z, y)[0], [z], [g]) < 1e-6


# --- backward ---------------------------------------------------------------

def test_single_linear_neuron_gradient():
    net = DenseNetwork([DenseLayer([[0.5, -1.0]], [0.2], "linear")])
    x, target = np.array([2.0, 3.0]), np.array([1.0])
    tr = forward(net, x)
    o = tr.output[0]
    (dw, db), = backward(net, tr, mse_grad(tr.output, target))
    np.testing.assert_allclose(dw, [2 * (o - 1.0) * x])
    np.testing.assert_allclose(db, [2 * (o - 1.0)])


def test_lambda_zero_is_plain_mse(rng):
    net = random_dae(rng)
    x = rng.normal(size=(8, 8))
    _, g0, _ = dae_objective(net, x, x, 0.1, 0.0)
    tr = forward(net, x)
    g_plain = backward(net, tr, mse_grad(tr.output, x))
    for (a, b), (c, d) in zip(g0, g_plain):
        np.testing.assert_array_equal(a, c)
        np.testing.assert_array_equal(b, d)


@pytest.mark.parametrize("rho,lam", [(0.1, 1.0), (0.05, 10.0), (0.3, 0.0)])
def test_dae_gradient_finite_differences(rho, lam):
    rng = np.random.default_rng(7)
    net = random_dae(rng)
    clean = rng.normal(size=(16, 8))
    noisy = clean + rng.normal(0, 0.1, clean.shape)
    _, grads, _ = dae_objective(net, noisy, clean, rho, lam)
    err = fd_max_rel_error(lambda: dae_objective(net, noisy, clean, rho, lam)[0],
                           net.params(), flat_grads(grads))
    assert err < 1e-4


@pytest.mark.parametrize("hidden", ["sigmoid", "relu", "linear"])
def test_classifier_gradient_finite_differences(hidden):
    rng = np.random.default_rng(3)
    net = net_of((5, 6, 4, 3), hidden, "softmax", seed=3)
    for layer in net.layers:
        layer.bias[:] = rng.normal(0, 0.2, layer.bias.shape)
    x, y = rng.normal(size=(7, 5)), rng.integers(0, 3, 7)

    def loss():
        return softmax_cross_entropy(forward(net, x).pre[-1], y)[0]

    tr = forward(net, x)
    _, g = softmax_cross_entropy(tr.pre[-1], y)
    grads = flat_grads(backward(net, tr, g, wrt="logits"))
    assert fd_max_rel_error(loss, net.params(), grads) < 1e-4

    # the same gradient through the softmax Jacobian path
    probs = tr.output
    onehot = np.eye(3)[y]
    g_out = -onehot / probs / len(y)
    grads2 = flat_grads(backward(net, tr, g_out, wrt="output"))
    for a, b in zip(grads, grads2):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_backward_with_dropout_matches_fd():
    rng = np.random.default_rng(5)
    net = net_of((4, 6, 3), "sigmoid", "softmax", seed=5)
    x, y = rng.normal(size=(5, 4)), rng.integers(0, 3, 5)
    tr = forward(net, x, dropout_rate=0.3, rng=np.random.default_rng(1), training=True)
    mask = tr.masks[0]

    def loss():
        h = forward(DenseNetwork(net.layers[:1]), x).output * mask
        z = h @ net.layers[1].weights.T + net.layers[1].bias
        return softmax_cross_entropy(z, y)[0]

    _, g = softmax_cross_entropy(tr.pre[-1], y)
    grads = flat_grads(backward(net, tr, g, wrt="logits"))
    assert fd_max_rel_error(loss, net.params(), grads) < 1e-4


def test_backward_shape_errors():
    net = net_of((3, 2), "relu", "linear")
    tr = forward(net, np.ones((4, 3)))
    with pytest.raises(ParameterError):
        backward(net, tr, np.ones((4, 3)))
    with pytest.raises(ParameterError):
        backward(net_of((3, 2, 2), "relu", "linear"), tr, np.ones((4, 2)))


# --- optimizer and dropout --------------------------------------------------

def test_optimizer_examples():
    p = [np.array([1.0, -2.0])]
    optimize_step(p, [np.zeros(2)], OptimizerState(), TrainConfig(optimizer="sgd_momentum"))
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    g = np.array([0.5, -3.0])
    optimize_step(p, [g], OptimizerState(),
                  TrainConfig(optimizer="sgd_momentum", learning_rate=1.0))
    np.testing.assert_array_equal(p[0], [0.5, 1.0])


@pytest.mark.parametrize("scale", [1e-3, 1.0, 1e4])
def test_adam_first_step_is_lr(scale):
    g = np.array([1.0, -2.0, 0.5]) * scale
    p = [np.zeros(3)]
    optimize_step(p, [g], OptimizerState(), TrainConfig(learning_rate=1e-3))
    # closed form: lr * g / (|g| + eps) after bias correction
    np.testing.assert_allclose(p[0], -1e-3 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_sgd_momentum_accumulates():
    p, st_ = [np.zeros(1)], OptimizerState()
    cfg = TrainConfig(optimizer="sgd_momentum", learning_rate=0.1, momentum=0.9)
    for _ in range(2):
        optimize_step(p, [np.ones(1)], st_, cfg)
    np.testing.assert_allclose(p[0], [-0.1 - 0.19])


def test_dropout_examples(rng):
    a = rng.normal(size=100)
    assert apply_dropout(a, 0.0, rng, True) is a
    assert apply_dropout(a, 0.7, rng, False) is a
    ones = np.ones(100_000)
    out = apply_dropout(ones, 0.5, np.random.default_rng(2), True)
    assert np.mean(out > 0) == pytest.approx(0.5, abs=0.01)
    assert np.mean(out) == pytest.approx(1.0, rel=0.02)
    with pytest.raises(ParameterError):
        apply_dropout(a, 1.0, rng, True)


def test_dropout_never_on_output_layer():
    net = net_of((4, 8, 3), "relu", "softmax")
    tr = forward(net, np.ones((2, 4)), dropout_rate=0.5, rng=np.random.default_rng(0),
                 training=True)
    assert tr.masks[0] is not None and tr.masks[1] is None
    np.testing.assert_allclose(tr.output.sum(axis=1), 1)


def test_config_validation():
    with pytest.raises(ParameterError):
        SparsityConfig(rho=0.0)
    with pytest.raises(ParameterError):
        SparsityConfig(lam=-1)
    for kw in (dict(learning_rate=0), dict(batch_size=0), dict(optimizer="rmsprop"),
               dict(dropout_rate=1.0)):
        with pytest.raises(ParameterError):
            TrainConfig(**kw)


# --- parameter counting -----------------------------------------------------

def test_count_params():
    rng = np.random.default_rng(0)
    ref = DenseNetwork.build(REFERENCE_FC_DIMS, "relu", "softmax", rng)
    sdae = DenseNetwork.build((256, 196, 96, 20, 4), "sigmoid", "softmax", rng)
    assert count_params(ref)[0] == 108672
    assert count_params(sdae)[0] == 70992
    assert count_params(sdae)[0] * 3 <= count_params(ref)[0] * 2
    assert count_params(DenseNetwork([DenseLayer.init(2, 3, "linear", rng)])) == (6, 9)


# --- model files ------------------------------------------------------------

def test_model_round_trip(tmp_path):
    net = net_of((256, 196, 96, 20, 4), "sigmoid", "softmax", seed=4)
    net.meta = {"variant": "sdae", "best_epoch": 3}
    save_model(net, tmp_path / "m.ismn")
    back = load_model(tmp_path / "m.ismn")
    assert back.meta == net.meta
    assert [l.activation for l in back.layers] == [l.activation for l in net.layers]
    for a, b in zip(back.params(), net.params()):
        assert a.tobytes() == b.tobytes()
    assert model_bytes(back) == model_bytes(net)
    x = np.random.default_rng(0).normal(size=(3, 256))
    np.testing.assert_array_equal(back.predict_proba(x), net.predict_proba(x))


def test_model_corrupt_files(tmp_path):
    raw = model_bytes(net_of((5, 3, 2), "relu", "softmax"))
    p = tmp_path / "bad.ismn"
    for bad in (raw[:-1], raw[:12], b"XXXX" + raw[4:], raw + b"\0",
                raw[:4] + b"\x09\x00" + raw[6:]):
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            load_model(p)
