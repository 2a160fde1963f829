import json
import math

import numpy as np
import pytest

from cotrain_lab import nn
from cotrain_lab.errors import ConfigError, ShapeError, StaleCacheError


def fd_check(f, arrays, grads, rng, n_coords=40, step=1e-4, rel_tol=1e-4):
    """Central finite differences on random coordinates of arrays vs grads."""
    worst = 0.0
    for arr, g in zip(arrays, grads):
        for _ in range(max(1, n_coords // len(arrays))):
            idx = tuple(rng.integers(0, s) for s in arr.shape)
            old = arr[idx]
            arr[idx] = old + step
            fp = f()
            arr[idx] = old - step
            fm = f()
            arr[idx] = old
            fd = (fp - fm) / (2 * step)
            denom = max(abs(fd), abs(g[idx]), 1e-8)
            worst = max(worst, abs(fd - g[idx]) / denom)
    assert worst <= rel_tol, f"worst FD relative error {worst}"
    return worst


def test_forward_zero_net():
    net = nn.Mlp(layer_dims=(3, 4, 2),
                 weights=[np.zeros((3, 4)), np.zeros((4, 2))],
                 biases=[np.zeros(4), np.zeros(2)], encoder_split=1)
    out, _ = nn.forward(net, np.array([1.0, 2.0, 3.0]))
    assert np.all(out == 0.0)


def test_forward_identity_linear_layer():
    net = nn.Mlp(layer_dims=(3, 3), weights=[np.eye(3)], biases=[np.zeros(3)],
                 encoder_split=1)
    x = np.array([0.1, -0.7, 2.0])
    out, _ = nn.forward(net, x)
    assert np.allclose(out, x)


def test_forward_matches_independent_reimplementation():
    rng = np.random.default_rng(11)
    net = nn.init_mlp((5, 8, 2), rng, encoder_split=1, zero_output=False)
    x = rng.standard_normal(5)

    # plain-python re-evaluation with math.exp only
    h = list(x)
    for layer, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = [sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j]
             for j in range(W.shape[1])]
        if layer < net.n_layers - 1:
            h = [v / (1.0 + math.exp(-v)) for v in z]
        else:
            h = z
    out, _ = nn.forward(net, x)
    assert np.allclose(out, h, rtol=1e-12)


def test_forward_shape_error():
    net = nn.init_mlp((4, 3), np.random.default_rng(0), encoder_split=1)
    with pytest.raises(ShapeError):
        nn.forward(net, np.zeros(5))


def test_backward_linear_least_squares_closed_form():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((4, 2))
    net = nn.Mlp(layer_dims=(4, 2), weights=[W.copy()], biases=[np.zeros(2)],
                 encoder_split=1)
    X = rng.standard_normal((16, 4))
    Y = rng.standard_normal((16, 2))
    out, cache = nn.forward(net, X)
    # L = sum((XW - Y)^2)  =>  dL/dW = 2 X^T (XW - Y)
    grads = nn.backward(net, cache, 2.0 * (out - Y))
    assert np.allclose(grads.dweights[0], 2.0 * X.T @ (X @ W - Y), rtol=1e-12)


def test_backward_zero_grad_output():
    rng = np.random.default_rng(5)
    net = nn.init_mlp((3, 6, 2), rng, zero_output=False, encoder_split=1)
    _, cache = nn.forward(net, rng.standard_normal((4, 3)))
    grads = nn.backward(net, cache, np.zeros((4, 2)))
    assert all(np.all(g == 0) for g in grads.parameters())
    assert np.all(grads.dx == 0)


def test_backward_finite_differences():
    rng = np.random.default_rng(17)
    net = nn.init_mlp((5, 12, 12, 3), rng, zero_output=False, encoder_split=2)
    x = rng.standard_normal((6, 5))
    gout = rng.standard_normal((6, 3))
    _, cache = nn.forward(net, x)
    grads = nn.backward(net, cache, gout)

    def objective():
        net.version += 1  # fresh forward, avoid stale-cache guard in helpers
        out, _ = nn.forward(net, x)
        return float((out * gout).sum())

    fd_check(objective, net.parameters(), grads.parameters(), rng, n_coords=120)


def test_backward_input_gradient():
    rng = np.random.default_rng(19)
    net = nn.init_mlp((4, 8, 2), rng, zero_output=False, encoder_split=1)
    x = rng.standard_normal(4)
    gout = rng.standard_normal(2)
    _, cache = nn.forward(net, x)
    dx = nn.backward(net, cache, gout).dx
    for i in range(4):
        h = 1e-5
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = ((nn.forward(net, xp)[0] * gout).sum() -
              (nn.forward(net, xm)[0] * gout).sum()) / (2 * h)
        assert dx[i] == pytest.approx(fd, rel=1e-6, abs=1e-9)


def test_stale_cache_rejected():
    rng = np.random.default_rng(2)
    net = nn.init_mlp((3, 4, 1), rng)
    _, cache = nn.forward(net, rng.standard_normal(3))
    net.version += 1
    with pytest.raises(StaleCacheError):
        nn.backward(net, cache, np.zeros(1))


def test_encoder_features_match_full_forward():
    rng = np.random.default_rng(23)
    net = nn.init_mlp((6, 10, 10, 10, 2), rng, encoder_split=2, zero_output=False)
    x = rng.standard_normal((5, 6))
    _, cache = nn.forward(net, x)
    z_inside = nn.features_from_cache(cache)
    z_standalone = nn.encoder_features(net, x)
    assert np.array_equal(z_inside, z_standalone)


def test_grl_scaling():
    g = np.array([1.0, -2.0])
    assert np.allclose(nn.grl(g, 1.0), -g)
    assert np.all(nn.grl(g, 0.0) == 0.0)
    assert np.allclose(nn.grl(g, 0.5), -0.5 * g)
    with pytest.raises(ConfigError):
        nn.grl(g, -1.0)


def test_grl_composite_finite_differences():
    # encoder -> head objective; reversed gradient must equal -strength * FD
    rng = np.random.default_rng(29)
    enc = nn.init_mlp((3, 6, 6, 2), rng, encoder_split=2, zero_output=False)
    head = nn.init_mlp((6, 4, 1), rng, encoder_split=1, zero_output=False)
    x = rng.standard_normal((5, 3))
    strength = 0.5

    def composite():
        z = nn.encoder_features(enc, x)
        out, _ = nn.forward(head, z)
        return float(out.sum())

    _, cache = nn.forward(enc, x)
    z = nn.features_from_cache(cache)
    out, head_cache = nn.forward(head, z)
    dfeat = nn.backward(head, head_cache, np.ones_like(out)).dx
    grads = nn.backward_from_features(enc, cache, nn.grl(dfeat, strength))

    def objective():
        enc.version += 1
        return -strength * composite()

    fd_check(objective, enc.parameters()[:4], grads.parameters()[:4],
             rng, n_coords=40)
    # head layers receive nothing through the feature path
    assert all(np.all(g == 0) for g in grads.dweights[enc.encoder_split:])


def test_timestep_embed_at_zero():
    emb = nn.timestep_embed(0.0, 8)
    assert np.allclose(emb, [0, 1, 0, 1, 0, 1, 0, 1])


def test_timestep_embed_dim2_base_frequency():
    emb = nn.timestep_embed(0.5, 2)
    assert np.allclose(emb, [math.sin(0.5), math.cos(0.5)], rtol=1e-15)


def test_timestep_embed_no_aliasing():
    t = 0.25
    shifted = t + 2 * math.pi / 1000.0
    assert not np.allclose(nn.timestep_embed(t, 16), nn.timestep_embed(shifted, 16))


def test_timestep_embed_odd_dim_rejected():
    with pytest.raises(ConfigError):
        nn.timestep_embed(0.5, 3)


def test_adam_zero_grad_keeps_params():
    rng = np.random.default_rng(31)
    params = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
    before = [p.copy() for p in params]
    state = nn.init_adam(params)
    nn.adam_step(state, params, [np.zeros((3, 2)), np.zeros(2)])
    assert all(np.array_equal(a, b) for a, b in zip(params, before))
    assert state.step == 1


def test_adam_first_step_sign_move():
    g = np.array([0.5, -2.0, 1e-3])
    params = [np.zeros(3)]
    state = nn.init_adam(params, lr=0.01)
    nn.adam_step(state, params, [g.copy()])
    # first step: update ~ -lr * g/|g| for |g| >> eps
    assert np.allclose(params[0], -0.01 * np.sign(g), rtol=1e-4)


def test_adam_quadratic_descent():
    # f(p) = 0.5 ||p - target||^2; lr small enough that Adam does not ring
    target = np.array([1.0, -2.0, 0.5])
    params = [np.zeros(3)]
    state = nn.init_adam(params, lr=0.01)
    losses = []
    for _ in range(100):
        g = params[0] - target
        losses.append(0.5 * float(g @ g))
        nn.adam_step(state, params, [g])
    assert all(losses[i + 1] < losses[i] for i in range(5, len(losses) - 1))


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(37)
    net = nn.init_mlp((4, 8, 8, 2), rng, encoder_split=2, zero_output=False)
    path = tmp_path / "ckpt.json"
    nn.save_mlp(net, path)
    loaded = nn.load_mlp(path)
    assert loaded.layer_dims == net.layer_dims
    assert loaded.encoder_split == net.encoder_split
    assert loaded.activation == net.activation
    for a, b in zip(net.parameters(), loaded.parameters()):
        assert np.array_equal(a, b)
    # and the serialized form itself round-trips byte-identically
    nn.save_mlp(loaded, tmp_path / "ckpt2.json")
    assert (tmp_path / "ckpt.json").read_bytes() == (tmp_path / "ckpt2.json").read_bytes()


def test_checkpoint_shape_validation(tmp_path):
    rng = np.random.default_rng(41)
    net = nn.init_mlp((4, 8, 2), rng)
    doc = nn.mlp_to_dict(net)
    doc["layer_dims"] = [4, 9, 2]
    with pytest.raises(ConfigError):
        nn.mlp_from_dict(doc)
