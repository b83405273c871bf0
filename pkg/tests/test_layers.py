import numpy as np
import pytest

from gaclab import tensor as T
from gaclab.layers import (
    AttentionBank, KernelMaskBank, LayerKind, LayerState, NetworkConfig, acnn_ratio, adaptive_attention_forward,
    adaptive_conv_extra, adaptive_conv_forward, build_network, make_adaptive_kernel, param_count,
    spatial_attention_forward,
)
from gaclab.tensor import Param, ShapeError, Tensor


def bank(data):
    return KernelMaskBank(Param(np.asarray(data, dtype=float), "m"))


# adaptive kernel --------------------------------------------------------------------

def test_ones_bank_returns_base():
    rng = np.random.default_rng(0)
    base = Tensor(rng.normal(size=(4, 3, 3, 3)))
    out = make_adaptive_kernel(base, KernelMaskBank.ones(2, 3, 3, 3), 1)
    np.testing.assert_array_equal(out.data, base.data)


def test_zero_bank_annihilates():
    base = Tensor(np.ones((2, 1, 3, 3)))
    out = make_adaptive_kernel(base, bank(np.zeros((3, 1, 3, 3))), 2)
    assert np.all(out.data == 0)


def test_elementwise_mask_example():
    base = Tensor([[[[2.0, 2.0], [2.0, 2.0]]]])
    out = make_adaptive_kernel(base, bank([[[[1.0, 0.0], [0.0, 1.0]]]]), 0)
    assert out.data.tolist() == [[[[2.0, 0.0], [0.0, 2.0]]]]


def test_mask_is_shared_across_output_channels():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(5, 2, 3, 3))
    masks = rng.normal(size=(3, 2, 3, 3))
    out = make_adaptive_kernel(Tensor(base), bank(masks), 2).data
    for c in range(5):
        np.testing.assert_array_equal(out[c], base[c] * masks[2])


def test_group_out_of_range():
    with pytest.raises(IndexError):
        make_adaptive_kernel(Tensor(np.ones((1, 1, 3, 3))), KernelMaskBank.ones(2, 1, 3, 3), 2)


# adaptive conv ----------------------------------------------------------------------

def test_adaptive_conv_with_ones_equals_standard():
    rng = np.random.default_rng(2)
    x, base = Tensor(rng.normal(size=(3, 6, 6))), Tensor(rng.normal(size=(4, 3, 3, 3)))
    got = adaptive_conv_forward(x, base, KernelMaskBank.ones(4, 3, 3, 3), 3, 1, 1).data
    ref = T.relu(T.conv2d(x, base, 1, 1)).data
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_identical_mask_rows_are_group_agnostic():
    rng = np.random.default_rng(3)
    row = rng.normal(size=(1, 2, 3, 3))
    b = bank(np.repeat(row, 2, axis=0))
    x, base = Tensor(rng.normal(size=(2, 5, 5))), Tensor(rng.normal(size=(3, 2, 3, 3)))
    a0 = adaptive_conv_forward(x, base, b, 0, 1, 1).data
    a1 = adaptive_conv_forward(x, base, b, 1, 1, 1).data
    np.testing.assert_array_equal(a0, a1)


def test_distinct_masks_route_differently():
    rng = np.random.default_rng(4)
    b = bank(rng.normal(size=(2, 2, 3, 3)))
    x, base = Tensor(rng.normal(size=(2, 5, 5))), Tensor(rng.normal(size=(3, 2, 3, 3)))
    diff = adaptive_conv_forward(x, base, b, 0, 1, 1).data - adaptive_conv_forward(x, base, b, 1, 1, 1).data
    assert np.max(np.abs(diff)) > 0


def test_fused_batch_path_matches_literal_kernel():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 3, 7, 7))
    base = Tensor(rng.normal(size=(4, 3, 3, 3)))
    b = bank(rng.normal(size=(3, 3, 3, 3)))
    groups = np.array([0, 1, 2, 2, 1, 0])
    fused = T.conv2d(Tensor(x), base, 2, 1, masks=b.masks, groups=groups).data
    for i, g in enumerate(groups):
        literal = T.conv2d(Tensor(x[i]), make_adaptive_kernel(base, b, int(g)), 2, 1).data
        np.testing.assert_allclose(fused[i], literal, atol=1e-12)


# attention --------------------------------------------------------------------------

def test_zero_attention_halves_every_channel():
    rng = np.random.default_rng(6)
    f = rng.normal(size=(3, 4, 4))
    out = adaptive_attention_forward(Tensor(f), AttentionBank.zeros(2, 3), 1).data
    np.testing.assert_array_equal(out, 0.5 * f)


def test_saturated_attention_passes_channel():
    maps = np.zeros((2, 2))
    maps[1, 0] = 20.0
    f = np.ones((2, 3, 3))
    out = adaptive_attention_forward(Tensor(f), AttentionBank(Param(maps, "a")), 1).data
    assert np.all(out[0] >= 1 - 1e-8)


def test_attention_scalar_example():
    out = adaptive_attention_forward(Tensor([[[2.0, 4.0]]]), AttentionBank.zeros(1, 1), 0).data
    assert out.tolist() == [[[1.0, 2.0]]]


def test_attention_channel_mismatch():
    with pytest.raises(ShapeError):
        adaptive_attention_forward(Tensor(np.ones((3, 2, 2))), AttentionBank.zeros(2, 4), 0)


def test_spatial_attention_examples():
    f = np.random.default_rng(7).normal(size=(3, 4, 4))
    out = spatial_attention_forward(Tensor(f), Tensor(np.zeros((1, 3, 1, 1)))).data
    np.testing.assert_array_equal(out, 0.5 * f)
    zeros = spatial_attention_forward(Tensor(np.zeros((2, 3, 3))), Tensor(np.ones((1, 2, 1, 1)))).data
    assert np.all(zeros == 0)
    per_site = spatial_attention_forward(Tensor([[[1.0, -1.0]]]), Tensor([[[[10.0]]]])).data
    s = lambda z: 1.0 / (1.0 + np.exp(-z))
    np.testing.assert_allclose(per_site, [[[1.0 * s(10.0), -1.0 * s(-10.0)]]], rtol=1e-12)
    assert abs(per_site[0, 0, 0] - 0.99995) < 1e-5 and abs(per_site[0, 0, 1] + 4.54e-5) < 1e-7


def test_spatial_attention_shape_mismatch():
    with pytest.raises(ShapeError):
        spatial_attention_forward(Tensor(np.ones((3, 2, 2))), Tensor(np.ones((1, 2, 1, 1))))


def test_layer_state_history_is_increasing():
    st = LayerState(LayerKind.ADAPTIVE_CONV)
    st.record(100, 0.9)
    with pytest.raises(ValueError):
        st.record(100, 0.8)


# network ------------------------------------------------------------------------------

def small_cfg(**kw):
    base = dict(preset="small", image_size=16, embedding_dim=8, nd=4, seed=0)
    base.update(kw)
    return NetworkConfig(**base)


def test_none_mode_ignores_group_labels():
    net = build_network(small_cfg(placement="none"))
    x = np.random.default_rng(8).uniform(size=(3, 1, 16, 16))
    a = net(x, [0, 1, 2]).data
    b = net(x, [3, 3, 3]).data
    np.testing.assert_array_equal(a, b)
    assert net.adaptive_layers() == []


def test_manual_mode_counts():
    net = build_network(NetworkConfig(preset="medium", placement="manual"))
    adaptive_convs = [c for c in net.conv_layers() if c.bank is not None]
    assert len(net.attention_layers()) == 4
    # both conv layers of the first block of each of the 4 units
    assert len(adaptive_convs) == 8
    assert all(".b0." in c.name for c in adaptive_convs)


def test_automatic_mode_starts_all_adaptive():
    net = build_network(NetworkConfig(preset="medium", placement="automatic"))
    convs = net.conv_layers()
    expected = [c for c in convs if not c.name.endswith(".proj")]
    assert [c for c in convs if c.bank is not None] == expected
    assert all(not layer.state.shared_flag for layer in net.adaptive_layers())


def test_unknown_preset_rejected():
    with pytest.raises(ValueError):
        NetworkConfig(preset="huge")


def test_reduction_property_all_groups_identical():
    net = build_network(small_cfg())
    rng = np.random.default_rng(9)
    for att in net.attention_layers():
        att.bank.maps.data[:] = rng.normal(size=att.bank.maps.shape[1])
    x = rng.uniform(size=(2, 1, 16, 16))
    outs = [net(x, [g, g]).data for g in range(4)]
    for o in outs[1:]:
        np.testing.assert_array_equal(o, outs[0])


def test_group_routing_permutation_invariance():
    net = build_network(small_cfg())
    rng = np.random.default_rng(10)
    for layer in net.adaptive_layers():
        data = layer.bank.masks.data if hasattr(layer.bank, "masks") else layer.bank.maps.data
        data[...] = rng.normal(size=data.shape)
    x = rng.uniform(size=(4, 1, 16, 16))
    groups = np.array([0, 1, 2, 3])
    ref = net(x, groups).data
    perm = np.array([2, 0, 3, 1])
    for layer in net.adaptive_layers():
        data = layer.bank.masks.data if hasattr(layer.bank, "masks") else layer.bank.maps.data
        data[...] = data[perm]
    inv = np.argsort(perm)
    np.testing.assert_allclose(net(x, inv[groups]).data, ref, atol=1e-12)


def test_two_layer_adaptive_network_gradients():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(3, 2, 5, 5)))
    groups = np.array([0, 1, 1])
    k1 = Param(rng.normal(size=(3, 2, 3, 3)), "k1")
    m1 = Param(rng.normal(size=(2, 2, 3, 3)), "m1")
    k2 = Param(rng.normal(size=(2, 3, 3, 3)), "k2")
    m2 = Param(rng.normal(size=(2, 3, 3, 3)), "m2")
    att = AttentionBank(Param(rng.normal(size=(2, 2)), "att"))
    w = Param(rng.normal(size=(4, 2 * 3 * 3)), "w")

    def fn():
        h = T.relu(T.conv2d(x, k1, 1, 1, masks=m1, groups=groups))
        h = T.relu(T.conv2d(h, k2, 2, 1, masks=m2, groups=groups))
        h = adaptive_attention_forward(h, att, groups)
        return T.tsum(T.mul(T.linear(T.reshape(h, (3, 18)), w), 0.3))

    assert T.grad_check(fn, [k1, m1, k2, m2, att.maps, w]) <= 1e-4


def test_parameter_accounting():
    cfg = small_cfg(num_classes=10)
    gac = build_network(cfg)
    base = build_network(cfg.model_copy(update={"placement": "none"}))
    counts = param_count(gac)
    expected = sum(c.bank.masks.size for c in gac.conv_layers() if c.bank is not None)
    expected += sum(a.bank.maps.size for a in gac.attention_layers())
    assert counts["adaptive_extra"] == expected
    assert counts["baseline_equivalent"] == param_count(base)["total"]
    assert counts["total"] == param_count(base)["total"] + expected


def test_param_count_formulas():
    assert adaptive_conv_extra(4, 64, 3, 3) == 2304
    assert adaptive_conv_extra(1, 64, 3, 3) == 64 * 9
    assert acnn_ratio(4, 128, 4) == 128


def test_checkpoint_roundtrip(tmp_path):
    net = build_network(small_cfg(num_classes=5))
    net.adaptive_layers()[0].state.shared_flag = True
    net.save(tmp_path / "ck")
    again = type(net).load(tmp_path / "ck")
    x = np.random.default_rng(12).uniform(size=(2, 1, 16, 16))
    np.testing.assert_array_equal(net(x, [1, 2]).data, again(x, [1, 2]).data)
    assert again.adaptive_layers()[0].state.shared_flag
    tensors, _ = T.load_checkpoint(tmp_path / "ck")
    assert sum(a.size for a in tensors.values()) == param_count(net)["total"]
