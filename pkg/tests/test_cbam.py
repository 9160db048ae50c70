import numpy as np
import pytest

from ncadiff import tensor as tc
from ncadiff.cbam import CbamParams, cbam_apply, channel_attention, spatial_attention
from ncadiff.rng import RngStream
from ncadiff.tensor import Tensor

from oracles import central_diff, conv_dense_ref


def params64(c=8, r=4, seed=3):
    return CbamParams(c, r, rng=RngStream(seed), dtype=np.float64)


def x64(c=8, H=4, W=4, seed=1):
    return Tensor(RngStream(seed).normal((c, H, W), np.float64),
                  requires_grad=False, dtype=np.float64)


def scalar_channel_attention(x, p):
    """Independent per-channel loop re-implementation."""
    c = x.shape[0]
    avg = [x[ch].mean() for ch in range(c)]
    mx = [x[ch].max() for ch in range(c)]

    def mlp(v):
        hid = np.maximum(np.asarray(v) @ p.mlp_w0.data, 0.0)
        return hid @ p.mlp_w1.data

    pre = mlp(avg) + mlp(mx)
    return 1.0 / (1.0 + np.exp(-pre))


def test_zero_mlp_gives_half_weights():
    p = params64()
    p.mlp_w0.data[:] = 0
    p.mlp_w1.data[:] = 0
    out = channel_attention(x64(), p)
    np.testing.assert_allclose(out.data, 0.5)


def test_constant_plane_doubles_mlp():
    p = params64()
    x = Tensor(np.tile(np.arange(8.0)[:, None, None], (1, 4, 4)), dtype=np.float64)
    out = channel_attention(x, p)
    v = np.arange(8.0)
    hid = np.maximum(v @ p.mlp_w0.data, 0.0) @ p.mlp_w1.data
    np.testing.assert_allclose(out.data, 1 / (1 + np.exp(-2 * hid)), atol=1e-12)


def test_channel_attention_matches_scalar_oracle():
    p = params64()
    p.mlp_w0.data = RngStream(9).normal(p.mlp_w0.shape, np.float64) * 0.3
    p.mlp_w1.data = RngStream(10).normal(p.mlp_w1.shape, np.float64) * 0.3
    x = x64()
    np.testing.assert_allclose(channel_attention(x, p).data,
                               scalar_channel_attention(x.data, p), atol=1e-6)


def test_channel_attention_spatial_permutation_invariant():
    p = params64()
    p.mlp_w0.data = RngStream(9).normal(p.mlp_w0.shape, np.float64) * 0.3
    x = x64()
    a = channel_attention(x, p).data
    perm = x.data.reshape(8, -1)
    perm = perm[:, np.random.default_rng(0).permutation(perm.shape[1])].reshape(8, 4, 4)
    b = channel_attention(Tensor(perm, dtype=np.float64), p).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_zero_spatial_conv_gives_half_weights():
    out = spatial_attention(x64(), params64())  # spatial conv starts at zero
    np.testing.assert_allclose(out.data, 0.5)


def test_channel_constant_input_mean_equals_max():
    p = params64()
    p.spatial_w.data = RngStream(11).normal(p.spatial_w.shape, np.float64) * 0.1
    plane = RngStream(12).normal((1, 4, 4), np.float64)
    x = Tensor(np.tile(plane, (8, 1, 1)), dtype=np.float64)
    mean_plane = tc.pool(x, "channel-avg").data
    max_plane = tc.pool(x, "channel-max").data
    np.testing.assert_allclose(mean_plane, max_plane, atol=1e-12)


def test_spatial_attention_matches_conv_oracle():
    p = params64()
    p.spatial_w.data = RngStream(13).normal(p.spatial_w.shape, np.float64) * 0.1
    p.spatial_b.data = np.array([0.2])
    x = x64(H=5, W=5)
    planes = np.stack([x.data.mean(axis=0), x.data.max(axis=0)])
    ref = conv_dense_ref(planes, p.spatial_w.data, "replicate", bias=p.spatial_b.data)
    np.testing.assert_allclose(spatial_attention(x, p).data,
                               1 / (1 + np.exp(-ref)), atol=1e-10)


def test_fresh_params_gate_at_quarter():
    p = params64()
    p.mlp_w0.data[:] = 0
    p.mlp_w1.data[:] = 0
    x = x64()
    np.testing.assert_allclose(cbam_apply(x, p).data, 0.25 * x.data, atol=1e-12)


def test_force_unit_gates_is_identity():
    p = params64()
    p.force_unit = True
    x = x64()
    np.testing.assert_array_equal(cbam_apply(x, p).data, x.data)


def test_attention_weights_strictly_in_unit_interval():
    p = params64()
    for t in p.parameters().values():
        t.data = RngStream(17).normal(t.shape, np.float64)
    x = x64()
    ca = channel_attention(x, p).data
    sa = spatial_attention(x, p).data
    assert np.all((ca > 0) & (ca < 1))
    assert np.all((sa > 0) & (sa < 1))


def test_scaling_rescales_pooled_statistics():
    x = x64()
    for s in (2.0, 7.5):
        np.testing.assert_allclose(tc.pool(Tensor(s * x.data, dtype=np.float64), "global-avg").data,
                                   s * tc.pool(x, "global-avg").data, atol=1e-12)
        np.testing.assert_allclose(tc.pool(Tensor(s * x.data, dtype=np.float64), "channel-max").data,
                                   s * tc.pool(x, "channel-max").data, atol=1e-12)


def test_cbam_gradient_matches_finite_difference():
    p = params64()
    for t in p.parameters().values():
        t.data = RngStream(19).normal(t.shape, np.float64) * 0.2
    x = x64()

    def loss_value():
        with tc.Tape():
            return tc.mean_all(tc.mul(cbam_apply(x, p), cbam_apply(x, p))).item()

    with tc.Tape():
        out = cbam_apply(x, p)
        p.mlp_w0.zero_grad()
        tc.backward(tc.mean_all(tc.mul(out, out)))
    fd = central_diff(loss_value, p.mlp_w0.data, step=1e-4)
    denom = np.maximum(np.abs(fd), 1e-3)
    assert np.max(np.abs(p.mlp_w0.grad - fd) / denom) < 1e-3


def test_parameter_count_and_divisibility():
    p = params64(c=64, r=4)
    assert p.parameter_count() == 2 * 64 * 16 + 99
    assert sum(t.size for t in p.parameters().values()) == p.parameter_count()
    with pytest.raises(ValueError):
        CbamParams(10, 4)
