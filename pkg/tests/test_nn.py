import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fisor_lab.nn import (
    MLP,
    AdamState,
    NonFiniteGradient,
    ShapeError,
    adam_step,
    backward,
    forward,
    load_checkpoint,
    save_checkpoint,
    soft_update,
    split_grads,
)


def numeric_grad(net, x, upstream, eps=1e-5):
    g = np.zeros(net.n_params)
    base = net.params.copy()
    for i in range(net.n_params):
        net.params[i] = base[i] + eps
        up = np.sum(forward(net, x) * upstream)
        net.params[i] = base[i] - eps
        down = np.sum(forward(net, x) * upstream)
        net.params[i] = base[i]
        g[i] = (up - down) / (2 * eps)
    return g


def test_gradient_matches_finite_differences_small():
    rng = np.random.default_rng(0)
    net = MLP.init((3, 5, 4, 2), rng)
    net.params[...] += 0.1 * rng.standard_normal(net.n_params)  # nonzero biases
    x = rng.standard_normal((6, 3))
    up = rng.standard_normal((6, 2))
    g = backward(net, x, up)
    num = numeric_grad(net, x, up)
    assert np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12) < 1e-6


def test_relu_kink_derivative_is_zero():
    net = MLP((1, 1, 1), np.array([1.0, 0.0, 1.0, 0.0]))
    g = backward(net, np.array([[0.0]]), np.array([[1.0]]))
    # pre-activation exactly 0: no gradient flows into the first layer
    assert g[0] == 0.0 and g[1] == 0.0


def test_init_bounds_and_zero_bias():
    net = MLP.init((7, 256, 1), np.random.default_rng(1))
    assert np.all(np.abs(net.weights[0]) <= 1 / np.sqrt(7))
    assert np.all(np.abs(net.weights[1]) <= 1 / np.sqrt(256))
    assert all(np.all(b == 0) for b in net.biases)


def test_init_same_stream_across_dtypes():
    a = MLP.init((4, 8, 2), np.random.default_rng(9))
    b = MLP.init((4, 8, 2), np.random.default_rng(9), np.float32)
    assert b.params.dtype == np.float32
    assert np.allclose(a.params, b.params, atol=1e-7)


def test_views_share_flat_vector():
    net = MLP.init((2, 3, 1), np.random.default_rng(0))
    net.weights[0][0, 0] = 42.0
    assert net.params[0] == 42.0
    layers = split_grads(net, np.arange(net.n_params, dtype=float))
    assert layers[0][0].shape == (2, 3) and layers[-1][1].shape == (1,)


def test_shape_errors():
    net = MLP.init((2, 3, 1), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        forward(net, np.zeros((4, 3)))
    with pytest.raises(ShapeError):
        backward(net, np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(ShapeError):
        MLP((2, 3, 1), np.zeros(5))
    with pytest.raises(ShapeError):
        soft_update(net, MLP.init((2, 4, 1), np.random.default_rng(0)), 0.1)


def test_adam_first_step_is_lr_times_sign():
    net = MLP((1, 1), np.array([0.0, 0.0]))
    opt = AdamState.for_net(net, lr=3e-4)
    adam_step(net, np.array([2.0, -0.5]), opt)
    # bias-corrected first step: m_hat / sqrt(v_hat) = sign(g)
    assert np.allclose(net.params, [-3e-4, 3e-4], atol=1e-10)
    assert opt.step == 1


def test_adam_rejects_non_finite():
    net = MLP((1, 1), np.array([0.0, 0.0]))
    opt = AdamState.for_net(net)
    with pytest.raises(NonFiniteGradient):
        adam_step(net, np.array([np.nan, 0.0]), opt)
    assert opt.step == 0 and np.all(net.params == 0)


def test_adam_minimises_quadratic():
    net = MLP((1, 1), np.array([3.0, -2.0]))
    opt = AdamState.for_net(net, lr=0.05)
    for _ in range(2000):
        adam_step(net, 2 * net.params, opt)
    assert np.allclose(net.params, 0.0, atol=1e-2)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 1.0))
def test_soft_update_interpolates(rate):
    rng = np.random.default_rng(0)
    t = MLP.init((2, 3, 1), rng)
    o = MLP.init((2, 3, 1), rng)
    expect = (1 - rate) * t.params + rate * o.params
    soft_update(t, o, rate)
    assert np.allclose(t.params, expect)


def test_checkpoint_roundtrip(tmp_path):
    net = MLP.init((3, 4, 2), np.random.default_rng(2), np.float32)
    opt = AdamState.for_net(net)
    adam_step(net, np.ones(net.n_params), opt)
    path = save_checkpoint(tmp_path / "n.ckpt", net, step=1, seed=5, opt=opt, extra={"k": 1})
    back, header, opt2 = load_checkpoint(path)
    assert back.dtype == np.float32 and np.array_equal(back.params, net.params)
    assert header["seed"] == 5 and header["extra"] == {"k": 1} and header["widths"] == [3, 4, 2]
    assert opt2.step == 1 and np.array_equal(opt2.m, opt.m) and np.array_equal(opt2.v, opt.v)
    again = save_checkpoint(tmp_path / "m.ckpt", back, step=1, seed=5, opt=opt2, extra={"k": 1})
    assert again.read_bytes() == path.read_bytes()


def test_checksum_tracks_params():
    net = MLP.init((2, 2, 1), np.random.default_rng(0))
    before = net.checksum()
    assert net.copy().checksum() == before
    net.params[0] += 1e-12
    assert net.checksum() != before


def test_zero_network_outputs_zero():
    net = MLP((3, 4, 2))
    assert np.all(forward(net, np.random.default_rng(0).standard_normal((5, 3))) == 0)


def test_identity_linear_layer():
    net = MLP((3, 3), np.concatenate([np.eye(3).ravel(), np.zeros(3)]))
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(forward(net, x), x)


def test_forward_matches_scalar_reimplementation():
    rng = np.random.default_rng(4)
    net = MLP.init((4, 6, 5, 2), rng)
    net.params[...] += 0.1 * rng.standard_normal(net.n_params)
    x = rng.standard_normal(4)
    # plain-python layer loop over the flat parameter vector
    p, widths, h, i = list(net.params), net.widths, list(x), 0
    for layer, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        W = [p[i + r * fo:i + (r + 1) * fo] for r in range(fi)]
        i += fi * fo
        b = p[i:i + fo]
        i += fo
        h = [sum(h[r] * W[r][c] for r in range(fi)) + b[c] for c in range(fo)]
        if layer < len(widths) - 2:
            h = [max(v, 0.0) for v in h]
    assert np.allclose(forward(net, x), h, atol=1e-12, rtol=0)


def test_dead_relu_path_has_zero_gradient():
    net = MLP((1, 1, 1), np.array([1.0, -5.0, 1.0, 0.0]))
    x = np.linspace(-1, 1, 7)[:, None]  # pre-activation always < 0
    g = backward(net, x, np.ones((7, 1)))
    assert g[0] == 0.0 and g[1] == 0.0 and g[2] == 0.0


def test_adam_zero_gradient_is_noop():
    net = MLP.init((2, 3, 1), np.random.default_rng(0))
    before = net.params.copy()
    adam_step(net, np.zeros(net.n_params), AdamState.for_net(net))
    assert np.array_equal(net.params, before)


def test_adam_matches_hand_stepped_scalar():
    grads = [0.5, -1.0, 0.25, 2.0]
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    x, m, v = 1.0, 0.0, 0.0
    net = MLP((1, 1), np.array([1.0, 0.0]))
    opt = AdamState.for_net(net, lr=lr)
    for k, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** k)) / ((v / (1 - b2 ** k)) ** 0.5 + eps)
        adam_step(net, np.array([g, 0.0]), opt)
    assert net.params[0] == pytest.approx(x, abs=1e-14)


@pytest.mark.parametrize("rate,expected", [(1.0, 1.0), (0.0, 0.0), (0.001, 0.001)])
def test_soft_update_examples(rate, expected):
    t, o = MLP((1, 1), np.zeros(2)), MLP((1, 1), np.ones(2))
    soft_update(t, o, rate)
    assert t.params[0] == pytest.approx(expected, abs=1e-15)


def test_gradient_linear_in_upstream():
    rng = np.random.default_rng(5)
    net = MLP.init((3, 6, 2), rng)
    x, up = rng.standard_normal((4, 3)), rng.standard_normal((4, 2))
    assert np.allclose(backward(net, x, 2 * up), 2 * backward(net, x, up), rtol=1e-12, atol=0)
