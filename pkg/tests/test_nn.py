import numpy as np
import pytest

from ndfcal.nn import (Adam, Mlp, ShapeError, StaleCacheError, load_networks, lr_schedule,
                       positional_encoding, save_networks)


def _loss(net, X, T):
    Y, _ = net.forward(X, keep_cache=False)
    return 0.5 * np.sum((Y - T) ** 2)


def _fd_check(net, X, T, h=1e-6):
    Y, cache = net.forward(X)
    grads, dX = net.backward(cache, Y - T)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = _loss(net, X, T)
            flat[i] = old - h
            down = _loss(net, X, T)
            flat[i] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - gflat[i]) / max(abs(fd), abs(gflat[i]), 1e-2))
    return worst, dX


def test_encoding_of_origin():
    for L in (1, 4, 10):
        e = positional_encoding(np.zeros(3), L)
        assert e.shape == (6 * L,)
        np.testing.assert_array_equal(e[:3 * L], 0)
        np.testing.assert_array_equal(e[3 * L:], 1)


def test_encoding_single_frequency():
    e = positional_encoding([np.pi / 2, 0, 0], 1)
    np.testing.assert_allclose(e[:3], [1, 0, 0], atol=1e-15)
    np.testing.assert_allclose(e[3:], [0, 1, 1], atol=1e-15)


def test_encoding_second_octave():
    e = positional_encoding([np.pi / 4, 0, 0], 2)
    assert e[3] == pytest.approx(1.0)
    assert e[0] == pytest.approx(np.sin(np.pi / 4))


def test_encoding_scale_and_batch(rng):
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(positional_encoding(x, 3, 0.5), positional_encoding(x * 0.5, 3))


def test_zero_network_with_relu_output_is_zero(rng):
    net = Mlp([4, 8, 3], "relu", "relu")
    net.set_params([np.zeros_like(p) for p in net.params()])
    assert not net.forward(rng.normal(size=(6, 4)))[0].any()


def test_identity_network_passes_input_through(rng):
    net = Mlp([3, 3], output_activation="identity")
    net.set_params([np.eye(3), np.zeros(3)])
    X = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(net.forward(X)[0], X)


@pytest.mark.parametrize("act", ["relu", "sigmoid", "softplus"])
def test_forward_matches_plain_evaluation(rng, act):
    net = Mlp([5, 7, 6, 2], act, "softplus", seed=2)
    x = rng.normal(size=(1, 5))
    f = {"relu": lambda z: np.maximum(z, 0), "sigmoid": lambda z: 1 / (1 + np.exp(-z)),
         "softplus": lambda z: np.log1p(np.exp(z))}
    a = x[0]
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = sum(a[k] * W[k] for k in range(len(a))) + b
        a = f["softplus"](z) if i == 2 else f[act](z)
    np.testing.assert_allclose(net.forward(x)[0][0], a, rtol=0, atol=1e-12)


def test_zero_upstream_gradient_gives_zero(rng):
    net = Mlp([3, 4, 2], seed=1)
    _, cache = net.forward(rng.normal(size=(5, 3)))
    grads, dX = net.backward(cache, np.zeros((5, 2)))
    assert all(not g.any() for g in grads) and not dX.any()


def test_linear_net_gradient_is_normal_equation(rng):
    X, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 1))
    net = Mlp([3, 1], seed=0)
    Y, cache = net.forward(X)
    m = len(X)
    grads, _ = net.backward(cache, 2 * (Y - y) / m)
    w = net.weights[0]
    np.testing.assert_allclose(grads[0], 2 * X.T @ (X @ w - y) / m, atol=1e-12)


@pytest.mark.parametrize("hidden,out", [("relu", "identity"), ("sigmoid", "softplus"),
                                        ("softplus", "sigmoid")])
def test_gradients_match_finite_differences(rng, hidden, out):
    net = Mlp([4, 6, 5, 3], hidden, out, seed=3)
    X, T = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    worst, _ = _fd_check(net, X, T)
    assert worst < 1e-6


def test_input_gradient_matches_finite_differences(rng):
    net = Mlp([3, 5, 2], "softplus", seed=4)
    X, T = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    _, dX = _fd_check(net, X, T)
    h = 1e-6
    for i in range(2):
        for j in range(3):
            Xp, Xm = X.copy(), X.copy()
            Xp[i, j] += h
            Xm[i, j] -= h
            fd = (_loss(net, Xp, T) - _loss(net, Xm, T)) / (2 * h)
            assert fd == pytest.approx(dX[i, j], rel=1e-6, abs=1e-9)


def test_wrong_input_width_rejected():
    with pytest.raises(ShapeError):
        Mlp([3, 2]).forward(np.zeros((1, 4)))


def test_stale_cache_rejected(rng):
    net = Mlp([3, 2])
    Y, cache = net.forward(rng.normal(size=(1, 3)))
    net.touch()
    with pytest.raises(StaleCacheError):
        net.backward(cache, Y)


def test_unknown_activation_rejected():
    with pytest.raises(ValueError):
        Mlp([3, 2], "tanhh")


def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    Adam(p).step(p, [np.zeros(2)], 0.1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_constant_gradient_steps_by_learning_rate():
    p = [np.zeros(1)]
    opt = Adam(p)
    for _ in range(2000):
        before = p[0].copy()
        opt.step(p, [np.array([0.7])], 1e-3)
    assert before - p[0] == pytest.approx(1e-3, rel=1e-4)


def test_adam_minimises_parabola():
    w = [np.zeros(1)]
    opt = Adam(w)
    for _ in range(500):
        opt.step(w, [2 * (w[0] - 3)], 0.1)
    assert abs(w[0][0] - 3) < 1e-3


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ShapeError):
        Adam(p).step(p, [np.zeros(3)], 0.1)


def test_learning_rate_schedule():
    assert lr_schedule(step=0, total=100) == pytest.approx(5e-4)
    assert lr_schedule(step=100, total=100) == pytest.approx(5e-6)
    assert lr_schedule(step=50, total=100) == pytest.approx(5e-5)
    with pytest.raises(ValueError):
        lr_schedule(step=101, total=100)


def test_checkpoint_round_trip(tmp_path):
    nets = {"a": Mlp([3, 4, 2], seed=1), "b": Mlp([2, 2], "sigmoid", "relu", seed=2)}
    save_networks(tmp_path / "c.ckpt", nets, {"note": "x"}, dtype="<f8")
    back, header = load_networks(tmp_path / "c.ckpt")
    assert header["note"] == "x" and header["order"] == ["a", "b"]
    for k in nets:
        for p, q in zip(nets[k].params(), back[k].params()):
            np.testing.assert_array_equal(p, q)
        assert back[k].config() == nets[k].config()


def test_float32_path(rng):
    net = Mlp([3, 4, 2], seed=0, dtype=np.float32)
    Y, cache = net.forward(rng.normal(size=(2, 3)))
    assert Y.dtype == np.float32
    grads, _ = net.backward(cache, np.ones_like(Y))
    assert all(g.dtype == np.float32 for g in grads)
