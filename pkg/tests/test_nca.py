import numpy as np
import pytest

from ncadiff import tensor as tc
from ncadiff.nca import (CellGrid, NcaRule, init_grid, nca_step, perceive,
                         read_noise, read_rgb, rollout)
from ncadiff.rng import RngStream
from ncadiff.tensor import Tensor

from oracles import central_diff, conv_depthwise_ref


def rule64(c=8, hidden=16, seed=0, fire_rate=0.5):
    return NcaRule(c, hidden, fire_rate=fire_rate, rng=RngStream(seed), dtype=np.float64)


def grid64(c=8, H=5, W=5, seed=1, t=3, T=10):
    rng = RngStream(seed)
    image = rng.normal((3, H, W), dtype=np.float64) * 0.3
    x_t = rng.normal((1, H, W), dtype=np.float64)
    return init_grid(image, x_t, t, T, c, dtype=np.float64), image, x_t


# ---------------------------------------------------------------------------
# init_grid

def test_init_grid_time_channel_only():
    g = init_grid(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)), 10, 10, 8)
    state = g.state.data
    assert np.all(state[:-1] == 0)
    np.testing.assert_array_equal(state[-1], np.ones((4, 4)))


def test_init_grid_time_encoding():
    g = init_grid(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)), 1, 100, 8)
    np.testing.assert_allclose(g.state.data[-1], 0.01)
    with pytest.raises(ValueError):
        init_grid(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)), 0, 100, 8)


def test_init_grid_copies_conditioning():
    g, image, x_t = grid64()
    np.testing.assert_array_equal(g.state.data[1:4], image)
    np.testing.assert_array_equal(g.state.data[4], x_t[0])
    assert np.all(g.state.data[0] == 0)
    assert np.all(g.state.data[5:-1] == 0)


def test_init_grid_rejects_small_channel_count():
    with pytest.raises(ValueError):
        init_grid(np.zeros((3, 4, 4)), np.zeros((1, 4, 4)), 1, 10, 6)


# ---------------------------------------------------------------------------
# perceive

def test_perceive_zero_kernels():
    g, _, _ = grid64()
    rule = rule64()
    for k in rule.kernels:
        k.data[:] = 0
    p = perceive(g, rule)
    c = g.channels
    np.testing.assert_array_equal(p.data[:c], g.state.data)
    assert np.all(p.data[c:] == 0)


def test_perceive_delta_kernel_copies_state():
    g, _, _ = grid64()
    rule = rule64()
    rule.kernels[0].data[:] = 0
    rule.kernels[0].data[:, 1, 1] = 1.0
    p = perceive(g, rule)
    c = g.channels
    np.testing.assert_array_equal(p.data[c:2 * c], g.state.data)


def test_perceive_matches_conv_oracle():
    g, _, _ = grid64()
    rule = rule64()
    p = perceive(g, rule)
    c = g.channels
    for i, k in enumerate(rule.kernels):
        ref = conv_depthwise_ref(g.state.data, k.data, "replicate")
        np.testing.assert_allclose(p.data[(i + 1) * c:(i + 2) * c], ref, atol=1e-12)


# ---------------------------------------------------------------------------
# nca_step

def test_step_zero_mask_is_identity():
    g, _, _ = grid64()
    rule = rule64()
    rule.fc2_w.data[:] = 0.1  # make the update nonzero
    out = nca_step(g, rule, np.zeros((1, 5, 5)))
    np.testing.assert_array_equal(out.state.data, g.state.data)


def test_fresh_rule_is_identity():
    g, _, _ = grid64()
    out = nca_step(g, rule64(), np.ones((1, 5, 5)))
    np.testing.assert_array_equal(out.state.data, g.state.data)


def test_step_hand_computation_1x1():
    c, h = 7, 2
    rule = NcaRule(c, h, rng=RngStream(0), dtype=np.float64)
    for k in rule.kernels:
        k.data[:] = 0  # 1x1 grid with replicate padding sees itself anyway
    rule.fc1_w.data[:] = 0.01
    rule.fc1_b.data[:] = 0.5
    rule.fc2_w.data[:] = 0.2
    state = np.arange(c, dtype=np.float64).reshape(c, 1, 1)
    out = nca_step(CellGrid(Tensor(state, dtype=np.float64)), rule, np.ones((1, 1, 1)))
    # perception = [state, 0, 0]; fc1 -> 0.01 * sum(state) + 0.5, relu, fc2 sums h copies
    pre = 0.01 * state.sum() + 0.5
    delta = 0.2 * h * max(pre, 0.0)
    np.testing.assert_allclose(out.state.data, state + delta, atol=1e-12)


def test_mask_gates_all_channels_of_a_cell():
    g, _, _ = grid64()
    rule = rule64()
    rule.fc2_w.data[:] = RngStream(5).normal(rule.fc2_w.shape, np.float64) * 0.1
    mask = np.zeros((1, 5, 5))
    mask[0, 2, 3] = 1.0
    out = nca_step(g, rule, mask)
    diff = out.state.data != g.state.data
    assert diff[:, 2, 3].any()
    diff[:, 2, 3] = False
    assert not diff.any()


def test_mask_shape_rejected():
    g, _, _ = grid64()
    with pytest.raises(tc.ShapeError):
        nca_step(g, rule64(), np.zeros((1, 4, 4)))


# ---------------------------------------------------------------------------
# rollout

def trained_rule(c=8, hidden=16, seed=2, fire_rate=0.5):
    rule = rule64(c, hidden, seed=seed, fire_rate=fire_rate)
    rng = RngStream(seed + 100)
    for t in (rule.fc2_w,):
        t.data = rng.normal(t.shape, np.float64) * 0.1
    return rule


def test_rollout_deterministic_at_full_fire_rate():
    g, _, _ = grid64()
    rule = trained_rule(fire_rate=1.0)
    a = rollout(g, rule, 3, RngStream(1)).state.data
    g2, _, _ = grid64()
    b = rollout(g2, rule, 3, RngStream(99)).state.data  # stream irrelevant at rate 1
    assert np.array_equal(a, b)


def test_rollout_composition():
    rule = trained_rule()
    g, _, _ = grid64()
    rng = RngStream(7)
    out_a = rollout(rollout(g, rule, 2, rng), rule, 3, rng).state.data
    g2, _, _ = grid64()
    out_b = rollout(g2, rule, 5, RngStream(7)).state.data
    assert np.array_equal(out_a, out_b)


def test_rollout_zero_init_identity_any_steps():
    g, _, _ = grid64()
    out = rollout(g, rule64(), 6, RngStream(3))
    np.testing.assert_array_equal(out.state.data, g.state.data)


def test_locality_chebyshev():
    rule = trained_rule(fire_rate=1.0)
    H = W = 9
    rng = RngStream(11)
    image = rng.normal((3, H, W), dtype=np.float64) * 0.3
    x_t = rng.normal((1, H, W), dtype=np.float64)
    n = 2
    base = rollout(init_grid(image, x_t, 4, 10, 8, dtype=np.float64), rule, n,
                   RngStream(0)).state.data
    image2 = image.copy()
    image2[:, 8, 8] += 1.0  # distance 8 from cell (0,0): > n
    pert = rollout(init_grid(image2, x_t, 4, 10, 8, dtype=np.float64), rule, n,
                   RngStream(0)).state.data
    assert np.array_equal(base[:, 0, 0], pert[:, 0, 0])
    # within range the perturbation must be visible somewhere
    assert not np.array_equal(base, pert)


def test_rollout_gradient_matches_finite_difference():
    rule = trained_rule(seed=4)
    rng = RngStream(21)
    image = rng.normal((3, 6, 6), dtype=np.float64) * 0.3
    x_t = rng.normal((1, 6, 6), dtype=np.float64)

    def loss_value():
        with tc.Tape():
            g = init_grid(image, x_t, 3, 10, 8, dtype=np.float64)
            out = rollout(g, rule, 2, RngStream(55))
            return tc.mean_all(read_noise(out)).item()

    with tc.Tape():
        g = init_grid(image, x_t, 3, 10, 8, dtype=np.float64)
        out = rollout(g, rule, 2, RngStream(55))
        rule.fc1_w.zero_grad()
        tc.backward(tc.mean_all(read_noise(out)))
    fd = central_diff(loss_value, rule.fc1_w.data, step=1e-4)
    denom = np.maximum(np.abs(fd), 1e-3)
    assert np.max(np.abs(rule.fc1_w.grad - fd) / denom) < 1e-3


def test_read_noise_and_rgb():
    g, image, _ = grid64()
    assert np.all(read_noise(g).data == 0)
    assert read_noise(g).shape == (1, 5, 5)
    np.testing.assert_array_equal(read_rgb(g).data, image)
    g.state.data[0] = 0.7
    np.testing.assert_allclose(read_noise(g).data, 0.7)


def test_parameter_count_formula():
    for c, h, k in ((8, 16, 2), (16, 64, 2), (64, 512, 2), (8, 4, 3)):
        rule = NcaRule(c, h, n_kernels=k, rng=RngStream(0))
        total = sum(t.size for t in rule.parameters().values())
        assert total == rule.parameter_count() == k * c * 9 + (k + 1) * c * h + h + h * c
