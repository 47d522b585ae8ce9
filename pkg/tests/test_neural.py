import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdflow import neural as nn
from hdflow.core import RngStream
from oracles import central_diff, naive_mlp, rel_err, sin_cos_table


def _random_net(seed, widths, activation="tanh"):
    r = RngStream(seed)
    spec = nn.MlpSpec(widths, activation)
    p = nn.init_params(spec, r)
    # non-zero biases so every parameter matters
    return p.with_values(p.values + 0.1 * r.normal(size=p.values.shape)), r


def test_identity_network():
    spec = nn.MlpSpec((2, 2))
    p = nn.ParamSet(spec, np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    assert np.array_equal(nn.mlp_forward(p, [1.0, 2.0]), [1.0, 2.0])


def test_zero_params_give_zero_output():
    p = nn.zeros_params(nn.MlpSpec((3, 5, 2)))
    assert np.array_equal(nn.mlp_forward(p, [1.0, -2.0, 3.0]), np.zeros(2))


def test_forward_matches_loop_oracle():
    p, r = _random_net(0, (2, 8, 2))
    x = r.normal(size=2)
    assert np.max(np.abs(nn.mlp_forward(p, x) - naive_mlp((2, 8, 2), p.values, x, "tanh"))) < 1e-12


def test_silu_forward_matches_loop_oracle():
    p, r = _random_net(1, (3, 6, 4, 2), "silu")
    x = r.normal(size=3)
    assert np.max(np.abs(nn.mlp_forward(p, x) - naive_mlp((3, 6, 4, 2), p.values, x, "silu"))) < 1e-12


def test_dimension_mismatch():
    p, _ = _random_net(0, (2, 4, 2))
    with pytest.raises(ValueError):
        nn.mlp_forward(p, [1.0, 2.0, 3.0])
    with pytest.raises(ValueError):
        nn.mlp_grad(p, [1.0, 2.0], [1.0])


def test_linear_input_grad_is_weight_row():
    p, _ = _random_net(2, (3, 2))
    W = p.values[:6].reshape(3, 2)
    _, gx = nn.mlp_grad(p, [0.3, -0.1, 0.2], [1.0, 0.0])
    # y = x @ W + b, so d y_0 / d x = W[:, 0]
    assert np.allclose(gx, W[:, 0], atol=1e-15)


def test_zero_cotangent_zero_grads():
    p, _ = _random_net(3, (3, 16, 3))
    gp, gx = nn.mlp_grad(p, [0.1, 0.2, 0.3], np.zeros(3))
    assert not gp.any() and not gx.any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["tanh", "silu"]))
def test_gradients_match_finite_differences(seed, activation):
    p, r = _random_net(seed, (3, 16, 3), activation)
    x, ct = r.normal(size=3), r.normal(size=3)
    gp, gx = nn.mlp_grad(p, x, ct)
    fd_x = central_diff(lambda v: nn.mlp_forward(p, v) @ ct, x)
    fd_p = central_diff(lambda v: nn.mlp_forward(p.with_values(v), x) @ ct, p.values)
    assert rel_err(gx, fd_x) < 1e-4
    assert rel_err(gp, fd_p) < 1e-4


def test_adam_zero_grad_keeps_params():
    p, _ = _random_net(4, (2, 3, 1))
    st0 = nn.AdamState.for_params(p, lr=0.1)
    st1, p1 = nn.adam_step(st0, p, np.zeros_like(p.values))
    assert np.array_equal(p1.values, p.values) and st1.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = nn.ParamSet(nn.MlpSpec((1, 1)), np.array([0.5, -0.5]))
    g = np.array([3.0, -0.01])
    _, p1 = nn.adam_step(nn.AdamState.for_params(p, lr=0.01), p, g)
    # after bias correction the first step is lr * g / (|g| + eps)
    assert np.allclose(p1.values - p.values, -0.01 * g / (np.abs(g) + 1e-8), atol=1e-15)


def test_adam_minimises_quadratic():
    p = nn.ParamSet(nn.MlpSpec((1, 1)), np.array([1.0, 0.0]))
    st0 = nn.AdamState.for_params(p, lr=0.1)
    for _ in range(200):
        st0, p = nn.adam_step(st0, p, 2.0 * p.values)
    assert abs(p.values[0]) < 1e-2


def test_adam_rejects_non_finite():
    p = nn.ParamSet(nn.MlpSpec((1, 1)), np.zeros(2))
    with pytest.raises(nn.NonFiniteGradientError):
        nn.adam_step(nn.AdamState.for_params(p), p, np.array([np.nan, 0.0]))


def test_time_embedding_zero_and_table():
    e0 = nn.time_embed(0.0, nn.TimeEmbedding(8, 1000.0))
    assert np.array_equal(e0[0::2], np.zeros(4)) and np.array_equal(e0[1::2], np.ones(4))
    e = nn.time_embed(0.5, nn.TimeEmbedding(4, 100.0))
    assert np.allclose(e, sin_cos_table(0.5, 4, 100.0), atol=1e-15)
    with pytest.raises(ValueError):
        nn.TimeEmbedding(3)


def test_checkpoint_round_trip_and_errors(tmp_path):
    p, _ = _random_net(5, (4, 7, 2))
    path = tmp_path / "p.bin"
    nn.save_params(p, path)
    q = nn.load_params(path)
    assert q.values.tobytes() == p.values.tobytes() and q.spec == p.spec
    raw = path.read_bytes()
    bad_version = raw[:8] + (99).to_bytes(2, "little") + raw[10:]
    with pytest.raises(nn.CheckpointVersionError):
        nn.params_from_bytes(bad_version)
    with pytest.raises(nn.CheckpointCorruptError):
        nn.params_from_bytes(raw[:-40])
    flipped = bytearray(raw)
    flipped[-40] ^= 1
    with pytest.raises(nn.CheckpointChecksumError):
        nn.params_from_bytes(bytes(flipped))


def test_init_is_deterministic():
    a = nn.init_params(nn.MlpSpec((5, 9, 3)), RngStream(11))
    b = nn.init_params(nn.MlpSpec((5, 9, 3)), RngStream(11))
    assert a.values.tobytes() == b.values.tobytes()
    lim = np.sqrt(6 / 14)
    assert np.all(np.abs(a.layers[0][0]) <= lim)


def test_conditional_mlp_masks_context_when_null():
    net = nn.ConditionalMlp.create(3, 2, (8,), RngStream(0))
    x = np.ones(3)
    assert np.array_equal(net(x, 0.3, [1.0, 2.0], null=True), net(x, 0.3, [-5.0, 7.0], null=True))
    assert not np.array_equal(net(x, 0.3, [1.0, 2.0]), net(x, 0.3, [-5.0, 7.0]))


def test_regression_grad_matches_finite_differences():
    net = nn.ConditionalMlp.create(2, 1, (6,), RngStream(1), nn.TimeEmbedding(4))
    r = RngStream(2)
    x, c, t, y = r.normal(size=(3, 2)), r.normal(size=(3, 1)), r.uniform(size=3), r.normal(size=(3, 2))
    null = np.array([0.0, 1.0, 0.0])
    _, g = net.regression_grad(x, t, c, null, y)

    def loss(v):
        return net.with_params(net.params.with_values(v)).regression_grad(x, t, c, null, y)[0]

    assert rel_err(g, central_diff(loss, net.params.values)) < 1e-6
