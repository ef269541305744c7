import numpy as np
import numpy.testing as npt
import pytest

from depthquery import autodiff as ad
from depthquery import substrate as sb
from depthquery.encoder import HiddenStack
from depthquery.errors import ConfigError


def make_params(d, cfg, seed=0):
    reg = ad.ParamRegistry(dtype=np.float64)
    return reg, sb.init_substrate(reg, cfg, d, np.random.default_rng(seed))


def stack_from(arrays):
    states = [ad.Tensor(np.asarray(a, dtype=np.float64)[None]) for a in arrays]
    return HiddenStack(states=states, n=states[0].shape[1])


def ln(vec, eps=1e-5):
    vec = np.asarray(vec, dtype=np.float64)
    return (vec - vec.mean(-1, keepdims=True)) / np.sqrt(vec.var(-1, keepdims=True) + eps)


def test_local_refine_zero_weights_is_residual_layernorm():
    cfg = sb.SubstrateConfig(k=1)
    reg, p = make_params(4, cfg)
    for kern in p.conv_kernels:
        kern.data[:] = 0.0
    p.mix.data[:] = 0.0
    h = np.random.default_rng(1).standard_normal((3, 4))
    out = sb.local_refine(p, ad.Tensor(h[None]))
    npt.assert_allclose(out.data[0], ln(h), atol=1e-9)


@pytest.mark.parametrize("kernels", [(1,), (1, 3), (1, 3, 5), (3, 5, 7)])
def test_local_refine_output_shape_for_any_kernel_set(kernels):
    cfg = sb.SubstrateConfig(k=1, kernel_sizes=kernels)
    reg, p = make_params(5, cfg)
    h = ad.Tensor(np.random.default_rng(2).standard_normal((1, 6, 5)))
    assert sb.local_refine(p, h).shape == (1, 6, 5)


def test_local_refine_hand_oracle_scalar_channel():
    # n=3, d=1, kernels {1, 3}; every weight set by hand, recomputed with
    # plain numpy convolution arithmetic
    cfg = sb.SubstrateConfig(k=1, kernel_sizes=(1, 3))
    reg, p = make_params(1, cfg)
    p.conv_kernels[0].data[:] = np.array([[2.0]])            # k=1 kernel
    p.conv_kernels[1].data[:] = np.array([[1.0], [0.5], [-1.0]])  # k=3 kernel
    p.mix.data[:] = np.array([[0.7], [-0.3]])
    h = np.array([1.0, -2.0, 3.0])

    conv1 = 2.0 * h
    padded = np.concatenate([[0.0], h, [0.0]])
    conv3 = np.array([padded[i] * 1.0 + padded[i + 1] * 0.5 + padded[i + 2] * (-1.0)
                      for i in range(3)])
    mixed = conv1 * 0.7 + conv3 * (-0.3)
    expected = ln((mixed + h)[None].T[None])  # d=1: population norm maps to 0
    out = sb.local_refine(p, ad.Tensor(h[None, :, None]))
    npt.assert_allclose(out.data, expected, atol=1e-9)


def test_depth_recurrence_k1_degenerate():
    cfg = sb.SubstrateConfig(k=1)
    reg, p = make_params(3, cfg)
    h = np.random.default_rng(3).standard_normal((2, 3))
    stack = stack_from([h])
    p.beta.data[:] = 0.0
    out = sb.build_substrate(p, cfg, stack)
    npt.assert_allclose(out.levels[0].data[0], ln(h), atol=1e-9)
    p.beta.data[:] = 2.0
    out = sb.build_substrate(p, cfg, stack)
    npt.assert_allclose(out.levels[0].data[0], ln(3.0 * h), atol=1e-9)


def test_recurrence_disabled_keeps_residual_stream():
    cfg = sb.SubstrateConfig(k=2, use_depth_gru=False)
    reg, p = make_params(3, cfg)
    h1 = np.random.default_rng(4).standard_normal((2, 3))
    h2 = np.random.default_rng(5).standard_normal((2, 3))
    out = sb.build_substrate(p, cfg, stack_from([h1, h2]))
    npt.assert_allclose(out.levels[0].data[0], ln(h1), atol=1e-9)
    npt.assert_allclose(out.levels[1].data[0], ln(h2), atol=1e-9)


def test_depth_recurrence_scalar_hand_oracle():
    # d=1, K=2, zero GRU parameters, beta=1, layer rows 3 and 5:
    # state1 = 3, state2 = 0.5 * 3 = 1.5; population layer norm of any
    # scalar is 0, so both outputs are bias exactly
    cfg = sb.SubstrateConfig(k=2)
    reg, p = make_params(1, cfg)
    for t in (p.gru.w_z, p.gru.u_z, p.gru.b_z, p.gru.w_r, p.gru.u_r, p.gru.b_r,
              p.gru.w_n, p.gru.u_n, p.gru.b_n):
        t.data[:] = 0.0
    p.beta.data[:] = 1.0
    p.ln_depth_bias.data[:] = 0.25
    h1 = np.full((1, 1), 3.0)
    h2 = np.full((1, 1), 5.0)
    out = sb.build_substrate(p, cfg, stack_from([h1, h2]))
    state2 = ad.gru_cell(ad.Tensor(np.full((1, 1), 5.0)),
                         ad.Tensor(np.full((1, 1), 3.0)), p.gru)
    npt.assert_allclose(state2.data, [[1.5]], atol=1e-12)
    npt.assert_allclose(out.levels[0].data, [[[0.25]]], atol=1e-9)
    npt.assert_allclose(out.levels[1].data, [[[0.25]]], atol=1e-9)


def test_budget_exceeding_layer_count_rejected():
    cfg = sb.SubstrateConfig(k=3)
    reg, p = make_params(2, cfg)
    with pytest.raises(ConfigError):
        sb.select_layers(stack_from([np.zeros((1, 2))] * 2), cfg)


def test_full_ablation_is_normalized_raw_layers():
    cfg = sb.SubstrateConfig(k=2, use_depth_gru=False, use_local_conv=False)
    reg, p = make_params(3, cfg)
    arrays = [np.random.default_rng(i).standard_normal((2, 3)) for i in range(3)]
    out = sb.build_substrate(p, cfg, stack_from(arrays))
    npt.assert_array_equal(out.enhanced.data[0], arrays[-1])
    npt.assert_allclose(out.levels[0].data[0], ln(arrays[1]), atol=1e-9)
    npt.assert_allclose(out.levels[1].data[0], ln(arrays[2]), atol=1e-9)


def test_build_twice_is_identical():
    cfg = sb.SubstrateConfig(k=3)
    reg, p = make_params(4, cfg, seed=7)
    arrays = [np.random.default_rng(10 + i).standard_normal((5, 4)) for i in range(4)]
    stack = stack_from(arrays)
    a = sb.build_substrate(p, cfg, stack)
    b = sb.build_substrate(p, cfg, stack)
    npt.assert_array_equal(a.enhanced.data, b.enhanced.data)
    for la, lb in zip(a.levels, b.levels):
        npt.assert_array_equal(la.data, lb.data)


def test_reversed_order_is_an_involution():
    cfg_rev = sb.SubstrateConfig(k=4, layer_order="reversed")
    perm = sb.layer_permutation(cfg_rev)
    npt.assert_array_equal(perm[perm], np.arange(4))


def test_shuffled_order_is_seed_pinned():
    c1 = sb.SubstrateConfig(k=5, layer_order="shuffled", shuffle_seed=11)
    c2 = sb.SubstrateConfig(k=5, layer_order="shuffled", shuffle_seed=11)
    c3 = sb.SubstrateConfig(k=5, layer_order="shuffled", shuffle_seed=12)
    npt.assert_array_equal(sb.layer_permutation(c1), sb.layer_permutation(c2))
    assert not np.array_equal(sb.layer_permutation(c1), sb.layer_permutation(c3))


def test_disabled_recurrence_has_zero_gru_gradient():
    cfg = sb.SubstrateConfig(k=2, use_depth_gru=False)
    reg, p = make_params(3, cfg)
    arrays = [np.random.default_rng(20 + i).standard_normal((2, 3)) for i in range(2)]
    out = sb.build_substrate(p, cfg, stack_from(arrays))
    loss = ad.tsum(ad.add(out.levels[0], out.levels[1]))
    ad.backward(loss)
    for t in (p.gru.w_z, p.gru.u_z, p.gru.b_z, p.gru.w_n, p.gru.u_n, p.gru.b_n):
        assert t.grad is None or not t.grad.any()


def test_substrate_file_roundtrip(tmp_path):
    cfg = sb.SubstrateConfig(k=2)
    reg = ad.ParamRegistry()  # float32 so the file payload is exact
    p = sb.init_substrate(reg, cfg, 4, np.random.default_rng(2))
    arrays = [np.random.default_rng(30 + i).standard_normal((3, 4)).astype(np.float32)
              for i in range(2)]
    sub = sb.build_substrate(p, cfg, stack_from(arrays))
    # rebuild with float32 tensors for exact payloads
    sub = sb.DepthSubstrate(
        enhanced=ad.Tensor(sub.enhanced.data.astype(np.float32)),
        levels=[ad.Tensor(lv.data.astype(np.float32)) for lv in sub.levels])
    path = str(tmp_path / "sub.dabs")
    sb.save(sub, cfg, path)
    loaded, order = sb.load(path)
    assert order == "normal"
    npt.assert_array_equal(loaded.enhanced.data, sub.enhanced.data)
    for a, b in zip(sub.levels, loaded.levels):
        npt.assert_array_equal(a.data, b.data)
