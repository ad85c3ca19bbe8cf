import numpy as np
import pytest
from hypothesis import given, strategies as st

from gradcheck import TINY, check_network, numeric_grad, relative_error
from hbcidrive import nn


def test_conv_output_chain_paper():
    sizes = [64]
    for _, k, s in nn.PAPER_ARCH.conv:
        sizes.append(nn.conv_output_size(sizes[-1], k, s))
    assert sizes == [64, 15, 6, 4]
    assert nn.QNetwork(nn.PAPER_ARCH).flat_size == 64 * 4 * 4


def test_conv_output_chain_desk():
    net = nn.QNetwork(nn.DESK_ARCH)
    assert net.flat_size == 32 * 4 * 4
    assert net.forward(np.zeros((3, 32, 32))).shape == (3,)


def test_conv_output_size_rejects_oversized_kernel():
    with pytest.raises(ValueError):
        nn.conv_output_size(4, 8, 4)


def test_zero_parameters_give_zero_q():
    net = nn.QNetwork(TINY)
    for p in net.params():
        p[...] = 0
    assert np.array_equal(net.forward(np.ones((3, 8, 8))), np.zeros(3))


def test_doubling_head_weights_doubles_q():
    net = nn.QNetwork(TINY, seed=3, dtype=np.float64)
    x = np.random.default_rng(0).random((3, 8, 8))
    q = net.forward(x)
    net.head.W *= 2
    net.head.b *= 2
    np.testing.assert_allclose(net.forward(x), 2 * q, rtol=1e-12)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="does not match"):
        nn.QNetwork(TINY).forward(np.zeros((3, 9, 8)))


def test_forward_is_deterministic():
    x = np.random.default_rng(1).random((4, 3, 32, 32)).astype(np.float32)
    a = nn.QNetwork(nn.DESK_ARCH, seed=5).forward(x)
    b = nn.QNetwork(nn.DESK_ARCH, seed=5).forward(x)
    assert a.tobytes() == b.tobytes()


def test_batch_matches_single_forward():
    net = nn.QNetwork(TINY, seed=2, dtype=np.float64)
    x = np.random.default_rng(2).random((5, 3, 8, 8))
    batch = net.forward(x)
    for i in range(5):
        np.testing.assert_allclose(net.forward(x[i]), batch[i], rtol=1e-12)


def test_gradients_tiny_network():
    worst = check_network(TINY, n_coords=40)
    assert max(worst.values()) < 1e-3, worst


@pytest.mark.parametrize("arch", [nn.DESK_ARCH, nn.PAPER_ARCH], ids=["desk", "paper"])
def test_gradients_preset_networks(arch):
    # thousands of rectifiers per layer: a small step keeps the difference
    # quotient from straddling a kink
    worst = check_network(arch, n_coords=6, seed=1, h=1e-6)
    assert max(worst.values()) < 1e-3, worst


def test_conv_layer_input_gradient():
    rng = np.random.default_rng(4)
    conv = nn.Conv2D(2, 3, 3, 2, rng, np.float64)
    x = rng.random((2, 2, 9, 9))             # (C, B, H, W)
    g = rng.normal(size=(3, 2, 4, 4))
    conv.forward(x)
    dx, (dW, db) = conv.backward(g)

    def f():
        return float(np.sum(conv.forward(x) * g))

    coords = np.arange(x.size)
    assert relative_error(dx.reshape(-1), numeric_grad(f, x, coords)) < 1e-6
    assert relative_error(dW.reshape(-1), numeric_grad(f, conv.W, np.arange(conv.W.size))) < 1e-6
    assert relative_error(db, numeric_grad(f, conv.b, np.arange(3))) < 1e-6


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(6)
    conv = nn.Conv2D(2, 3, 3, 2, rng, np.float64)
    x = rng.random((2, 1, 7, 7))
    out = conv.forward(x)
    ref = np.zeros((3, 3, 3))
    for o in range(3):
        for i in range(3):
            for j in range(3):
                patch = x[:, 0, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
                ref[o, i, j] = np.sum(patch * conv.W[o]) + conv.b[o]
    np.testing.assert_allclose(out[:, 0], ref, rtol=1e-12)


def test_dense_layer_gradient():
    rng = np.random.default_rng(5)
    dense = nn.Dense(7, 4, rng, np.float64)
    x = rng.random((3, 7))
    g = rng.normal(size=(3, 4))
    dense.forward(x)
    dx, (dW, db) = dense.backward(g)

    def f():
        return float(np.sum(dense.forward(x) * g))

    assert relative_error(dx.reshape(-1), numeric_grad(f, x, np.arange(x.size))) < 1e-6
    assert relative_error(dW.reshape(-1), numeric_grad(f, dense.W, np.arange(28))) < 1e-6


def test_relu_forward_and_tie_rule():
    z = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(nn.relu(z), [0.0, 0.0, 2.0])
    assert np.array_equal(nn.relu_backward(np.ones(3), z), [0.0, 0.0, 1.0])


def test_zero_upstream_gradient_gives_zero_gradients():
    net = nn.QNetwork(TINY, seed=1)
    grads = nn.backward(net, np.ones((3, 8, 8)), np.zeros(3))
    assert all(not np.any(g) for g in grads.values())


def test_gradient_is_additive_over_inputs():
    net = nn.QNetwork(TINY, seed=1, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 8, 8))
    gq = rng.normal(size=(2, 3))
    both = nn.backward(net, x, gq)
    a = nn.backward(net, x[:1], gq[:1])
    b = nn.backward(net, x[1:], gq[1:])
    for name in both:
        np.testing.assert_allclose(both[name], a[name] + b[name], rtol=1e-10, atol=1e-12)


def test_sgd_update_is_plain_descent():
    net = nn.QNetwork(TINY, seed=0, dtype=np.float64)
    before = {k: v.copy() for k, v in net.named_params().items()}
    grads = {k: np.full_like(v, 0.5) for k, v in before.items()}
    nn.apply_update(net, grads, nn.OptimizerState(lr=0.1, rule="sgd"))
    for k, v in net.named_params().items():
        np.testing.assert_allclose(v, before[k] - 0.05)


def test_adam_update_matches_hand_computation():
    net = nn.QNetwork(TINY, seed=0, dtype=np.float64)
    opt = nn.OptimizerState(lr=1e-2)
    p0 = net.head.b.copy()
    g1, g2 = np.array([1.0, -2.0, 0.5]), np.array([0.5, 1.0, 0.0])
    zero = {k: np.zeros_like(v) for k, v in net.named_params().items()}
    for g in (g1, g2):
        nn.apply_update(net, {**zero, "head.b": g}, opt)
    m = 0.9 * (0.1 * g1) + 0.1 * g2
    v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
    m1, v1 = 0.1 * g1, 0.001 * g1 ** 2
    step1 = 1e-2 * (m1 / 0.1) / (np.sqrt(v1 / 0.001) + 1e-8)
    step2 = 1e-2 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    np.testing.assert_allclose(net.head.b, p0 - step1 - step2, rtol=1e-10)
    assert opt.step == 2


def test_zero_gradients_leave_parameters_unchanged():
    net = nn.QNetwork(TINY, seed=0)
    before = [p.copy() for p in net.params()]
    nn.apply_update(net, {k: np.zeros_like(v) for k, v in net.named_params().items()},
                    nn.OptimizerState())
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_non_finite_gradient_names_layer():
    net = nn.QNetwork(TINY)
    grads = {k: np.zeros_like(v) for k, v in net.named_params().items()}
    grads["conv2.W"][0, 0, 0, 0] = np.nan
    with pytest.raises(nn.NonFiniteGradientError, match="conv2"):
        nn.apply_update(net, grads, nn.OptimizerState())


def test_optimizer_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        nn.OptimizerState(lr=0)


def test_toy_regression_loss_decreases():
    rng = np.random.default_rng(0)
    net = nn.QNetwork(TINY, seed=0)
    x = rng.random((16, 3, 8, 8)).astype(np.float32)
    target = rng.normal(size=(16, 3)).astype(np.float32)
    opt = nn.OptimizerState(lr=3e-3)
    losses = []
    for _ in range(200):
        q = net.forward(x)
        losses.append(float(np.mean((q - target) ** 2)))
        nn.apply_update(net, net.backward(2 * (q - target) / q.size), opt)
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[-1] < 0.1 * smooth[0]
    assert np.all(np.diff(smooth[::20]) < 0)


def test_save_load_roundtrip(tmp_path):
    net = nn.QNetwork(nn.DESK_ARCH, seed=9)
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    nn.save(net, p1)
    loaded = nn.load(p1)
    nn.save(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    assert net.forward(x).tobytes() == loaded.forward(x).tobytes()
    assert "total" in (tmp_path / "a.bin.txt").read_text()


def test_load_rejects_bad_files(tmp_path):
    net = nn.QNetwork(TINY)
    p = tmp_path / "n.bin"
    nn.save(net, p)
    data = p.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTANET!" + data[8:])
    with pytest.raises(nn.CheckpointError, match="magic"):
        nn.load(bad)
    bad.write_bytes(data[:8] + (99).to_bytes(4, "little") + data[12:])
    with pytest.raises(nn.CheckpointError, match="version"):
        nn.load(bad)
    bad.write_bytes(data[:-3])
    with pytest.raises(nn.CheckpointError, match="truncated"):
        nn.load(bad)
    bad.write_bytes(data + b"\0")
    with pytest.raises(nn.CheckpointError, match="trailing"):
        nn.load(bad)


def test_copy_is_independent():
    net = nn.QNetwork(TINY, seed=1)
    other = net.copy()
    net.head.W += 1
    assert not np.array_equal(net.head.W, other.head.W)


@given(st.integers(min_value=8, max_value=40), st.integers(1, 5), st.integers(1, 4))
def test_conv_output_size_formula(n, k, s):
    if k > n:
        return
    out = nn.conv_output_size(n, k, s)
    assert (out - 1) * s + k <= n < out * s + k
