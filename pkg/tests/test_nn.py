import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import all_layer_errors, fcn_error, vae_error
from oracles import cross_entropy_loop
from spda.nn import (
    AdamState,
    Checkpoint,
    Conv3x3,
    Dense,
    MaxPool2,
    Network,
    NetworkError,
    ReLU,
    Upsample2,
    adam_step,
    checkpoint_of,
    fcn_spec,
    lr_schedule,
    network_from_checkpoint,
    softmax,
    spatial_cross_entropy,
)
from spda.synthetic import SyntheticConfig, generate_samples


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------


@pytest.mark.parametrize("name", ["conv3x3", "dense", "relu", "maxpool2", "upsample2"])
def test_layer_gradients(name):
    errs = all_layer_errors(seed=0)
    assert errs[name] < 1e-3, errs


def test_fcn_gradient():
    assert fcn_error(seed=0) < 1e-3


def test_vae_gradient():
    assert vae_error(seed=0) < 1e-3


def test_conv_matches_direct_convolution():
    gen = np.random.default_rng(1)
    conv = Conv3x3(2, 3, gen, np.float64)
    x = gen.standard_normal((1, 5, 6, 2))
    y = conv.forward(x)
    W = conv.W.reshape(3, 3, 2, 3)
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 6, 3))
    for i in range(5):
        for j in range(6):
            ref[i, j] = np.einsum("abc,abco->o", xp[i : i + 3, j : j + 3], W) + conv.b
    np.testing.assert_allclose(y[0], ref, atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    net = Network(fcn_spec(1, 3, 4), 0)
    x = np.random.default_rng(0).random((2, 8, 8, 1))
    y = net.logits(x)
    for g in net.backward(np.zeros_like(y)):
        assert not np.any(g)


@pytest.mark.parametrize("layer", [Conv3x3(1, 1, np.random.default_rng(0)), Dense(2, 2), ReLU(), MaxPool2(), Upsample2()])
def test_backward_before_forward_rejected(layer):
    with pytest.raises(NetworkError):
        layer.backward(np.zeros((1, 2, 2, 1)))


def test_network_backward_before_forward_rejected():
    with pytest.raises(NetworkError):
        Network(fcn_spec(), 0).backward(np.zeros((1, 8, 8, 3)))


def test_maxpool_ties_route_to_first():
    pool = MaxPool2()
    pool.forward(np.ones((1, 2, 2, 1)))
    g = pool.backward(np.full((1, 1, 1, 1), 5.0))
    np.testing.assert_array_equal(g[0, ..., 0], [[5, 0], [0, 0]])


# --------------------------------------------------------------------------
# forward / loss
# --------------------------------------------------------------------------


def test_forward_is_a_simplex_of_label_shape():
    net = Network(fcn_spec(1, 4, 4), 3)
    p = net.forward(np.random.default_rng(0).random((2, 16, 12, 1)))
    assert p.shape == (2, 16, 12, 4)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-5)
    assert np.all(p >= 0)


def test_zero_final_layer_gives_uniform():
    net = Network(fcn_spec(1, 3, 4), 0, zero_last=True)
    p = net.forward(np.random.default_rng(0).random((1, 8, 8, 1)))
    np.testing.assert_allclose(p, 1 / 3, atol=1e-7)


def test_forward_deterministic_for_seed():
    x = np.random.default_rng(0).random((1, 8, 8, 1))
    a = Network(fcn_spec(), 7).forward(x)
    b = Network(fcn_spec(), 7).forward(x)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, Network(fcn_spec(), 8).forward(x))


def test_shape_errors():
    net = Network(fcn_spec(1, 3, 4), 0)
    with pytest.raises(NetworkError):
        net.logits(np.zeros((1, 8, 8, 3)))
    with pytest.raises(NetworkError):
        net.logits(np.zeros((1, 10, 8, 1)))
    with pytest.raises(NetworkError):
        Network([{"type": "relu"}])


def test_cross_entropy_matches_scalar_loop():
    gen = np.random.default_rng(0)
    logits = gen.standard_normal((4, 4, 3))
    lab = gen.integers(0, 3, size=(4, 4))
    loss, _ = spatial_cross_entropy(logits, lab)
    assert abs(loss - cross_entropy_loop(logits, lab)) < 1e-10


def test_cross_entropy_closed_forms():
    lab = np.array([[0, 1], [2, 1]])
    loss, grad = spatial_cross_entropy(np.zeros((2, 2, 3)), lab)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    onehot = np.eye(3)[lab]
    np.testing.assert_allclose(grad, (1 / 3 - onehot) / 4, atol=1e-15)
    perfect, _ = spatial_cross_entropy(onehot * 50.0, lab)
    assert perfect <= 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(NetworkError):
        spatial_cross_entropy(np.zeros((2, 2, 3)), np.full((2, 2), 3))
    with pytest.raises(NetworkError):
        spatial_cross_entropy(np.zeros((2, 2, 3)), np.zeros((2, 3), int))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5))
def test_cross_entropy_gradient_is_softmax_minus_onehot(seed, C):
    gen = np.random.default_rng(seed)
    logits = gen.standard_normal((3, 5, C)) * 5
    lab = gen.integers(0, C, size=(3, 5))
    _, grad = spatial_cross_entropy(logits, lab)
    np.testing.assert_allclose(grad, (softmax(logits) - np.eye(C)[lab]) / lab.size, atol=1e-12)
    np.testing.assert_allclose(grad.sum(-1), 0.0, atol=1e-12)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


def test_adam_first_step_is_minus_lr():
    p = [np.array([0.0])]
    adam_step(p, [np.array([1.0])], AdamState(lr=0.01))
    assert p[0][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_zero_gradient_no_change():
    p = [np.arange(4.0)]
    adam_step(p, [np.zeros(4)], AdamState())
    np.testing.assert_array_equal(p[0], np.arange(4.0))


def test_adam_matches_hand_recurrence():
    p, st_ = [np.array([1.0])], AdamState(lr=0.1)
    m = v = 0.0
    x = 1.0
    for t, g in enumerate([0.5, -1.0, 2.0], start=1):
        adam_step(p, [np.array([g])], st_)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x -= 0.1 * (m / (1 - 0.9**t)) / (math.sqrt(v / (1 - 0.999**t)) + 1e-8)
    assert p[0][0] == pytest.approx(x, rel=1e-12)


def test_adam_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        adam_step([np.zeros(2)], [np.array([1.0, np.nan])], AdamState())


def test_lr_schedule():
    assert lr_schedule(1) == 0.0005
    assert lr_schedule(30000) == 0.0005
    assert lr_schedule(30001) == 0.00005


def test_loss_decreases_on_fixed_batch():
    samples = generate_samples(SyntheticConfig(size=32, num_samples=4, noise_sigma=0.0), 0)
    x = np.stack([s.image for s in samples])
    y = np.stack([s.label for s in samples])
    drops = []
    for seed in range(3):
        net = Network(fcn_spec(1, 3, 8), seed)
        state = AdamState(lr=2e-3)
        losses = []
        for _ in range(50):
            loss, g = spatial_cross_entropy(net.logits(x), y)
            losses.append(loss)
            adam_step(net.parameters(), net.backward(g), state)
        drops.append(losses[-1] < losses[0])
        assert losses[-1] < 0.9 * losses[0]
    assert all(drops)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = Network(fcn_spec(1, 3, 4), 2)
    x = np.random.default_rng(0).random((1, 8, 8, 1)).astype(np.float32)
    state = AdamState()
    _, g = spatial_cross_entropy(net.logits(x), np.zeros((1, 8, 8), int))
    adam_step(net.parameters(), net.backward(g), state)
    ck = checkpoint_of(net, step=1, adam=state, meta={"note": "x"})
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    assert back.params.tobytes() == ck.params.tobytes()
    assert back.step == 1 and back.meta == {"note": "x"} and back.adam.t == 1
    for a, b in zip(back.adam.m + back.adam.v, state.m + state.v):
        assert a.tobytes() == b.tobytes()
    again = network_from_checkpoint(back)
    assert again.forward(x).tobytes() == net.forward(x).tobytes()
    back.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nonsense")
    with pytest.raises(NetworkError):
        Checkpoint.load(tmp_path / "x")
    net = Network(fcn_spec(1, 3, 4), 2)
    checkpoint_of(net).save(tmp_path / "ok")
    (tmp_path / "cut").write_bytes((tmp_path / "ok").read_bytes()[:-4])
    with pytest.raises(NetworkError):
        Checkpoint.load(tmp_path / "cut")


def test_set_flat_size_checked():
    net = Network(fcn_spec(1, 3, 4), 0)
    with pytest.raises(NetworkError):
        net.set_flat(np.zeros(3))
    flat = net.get_flat()
    net.set_flat(flat * 2)
    np.testing.assert_array_equal(net.get_flat(), flat * 2)
