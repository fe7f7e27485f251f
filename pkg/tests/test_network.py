import numpy as np
import pytest

from oasflow import ops
from oasflow.correlation import cost_volume_sampling, cost_volume_warping
from oasflow.gradcheck import reduced_config
from oasflow.network import (LevelState, NetConfig, OASNet, closed_form_count, config_from_params,
                             count_parameters, init_params, parameter_ledger)
from oasflow.tensor import ParamStore, ShapeError, Tensor

REFERENCE_PARAMS = 6.16e6


def images(rng, h=64, w=64, n=1):
    return Tensor(rng.random((n, 3, h, w)).astype(np.float32)), Tensor(rng.random((n, 3, h, w)).astype(np.float32))


def conv_count(o, i, k=3):
    return o * i * k * k + o


def ledger_count(cfg: NetConfig) -> int:
    """Independent recount from the channel lists."""
    total, prev = 0, 3
    for c in cfg.encoder_channels:
        total += conv_count(c, prev) + conv_count(c, c)
        prev = c
    d = (2 * cfg.radius + 1) ** 2
    for lvl in cfg.levels[:1] if cfg.share_decoder else cfg.levels:
        oa = 2 * conv_count(d, d) if cfg.occlusion else conv_count(d, d)
        feat = cfg.adapter_channels if cfg.share_decoder else cfg.encoder_channels[lvl - 1]
        prev = d + feat + 2
        trunk = 0
        for c in cfg.decoder_channels:
            trunk += conv_count(c, prev)
            prev = c
        heads = conv_count(2, prev) + (conv_count(1, prev) if cfg.occlusion else 0)
        total += oa + trunk + heads
    if cfg.share_decoder:
        total += sum(conv_count(cfg.adapter_channels, cfg.encoder_channels[l - 1], 1) for l in cfg.levels)
    return total


# --------------------------------------------------------------------------- parameter ledger


def test_encoder_level_one_count():
    assert conv_count(16, 3) + conv_count(16, 16) == 2768
    params = init_params(NetConfig())
    enc1 = sum(p.size for p in params if p.name.startswith("enc1."))
    assert enc1 == 2768


def test_empty_store_counts_zero():
    assert count_parameters(ParamStore()) == 0


@pytest.mark.parametrize("cfg", [NetConfig(), NetConfig(occlusion=False), NetConfig(share_decoder=True),
                                 reduced_config()], ids=["default", "no-occ", "shared", "reduced"])
def test_count_matches_closed_form(cfg):
    params = init_params(cfg)
    assert count_parameters(params) == closed_form_count(cfg) == ledger_count(cfg)
    assert sum(size for *_, size in parameter_ledger(params)) == count_parameters(params)


def test_full_model_within_band_of_published_count():
    n = count_parameters(init_params(NetConfig()))
    assert abs(n - REFERENCE_PARAMS) <= 0.15 * REFERENCE_PARAMS


def test_decoder_channel_ledger():
    cfg = NetConfig()
    assert cfg.decoder_channels == (128, 128, 128, 128, 128, 96, 64, 32)
    assert cfg.encoder_channels == (16, 32, 64, 96, 128, 160)
    assert cfg.search.channels == 81
    assert cfg.decoder_in_channels(2) == 81 + 32 + 2 == 115
    params = init_params(cfg)
    assert params["dec2.conv1.weight"].shape == (128, 115, 3, 3)
    assert params["dec2.oa.conv1.weight"].shape == params["dec2.oa.conv2.weight"].shape == (81, 81, 3, 3)


def test_init_is_he_normal_with_zero_bias():
    params = init_params(NetConfig(), seed=0)
    w = params["dec3.conv2.weight"].data
    assert w.std() == pytest.approx(np.sqrt(2 / (128 * 9)), rel=0.02)
    assert abs(w.mean()) < 1e-3
    assert np.all(params["dec3.conv2.bias"].data == 0)


def test_variants_share_init_of_common_layers():
    on = init_params(NetConfig(occlusion=True), seed=4)
    off = init_params(NetConfig(occlusion=False), seed=4)
    for name in ("enc3.conv1.weight", "dec4.conv5.weight", "dec2.flow.weight"):
        np.testing.assert_array_equal(on[name].data, off[name].data)


def test_config_round_trips_through_names():
    for cfg in (NetConfig(), NetConfig(occlusion=False), NetConfig(share_decoder=True), reduced_config()):
        assert config_from_params(init_params(cfg), cfg.correlation) == cfg


# --------------------------------------------------------------------------- pyramid


def test_pyramid_shapes(rng):
    net = OASNet(NetConfig())
    feats = net.extract_pyramid(images(rng)[0])
    assert [f.shape[1] for f in feats] == [16, 32, 64, 96, 128, 160]
    assert feats[5].shape == (1, 160, 1, 1)
    feats = net.extract_pyramid(Tensor(rng.random((1, 3, 128, 192)).astype(np.float32)))
    assert feats[2].shape == (1, 64, 16, 24)
    for k, f in enumerate(feats, start=1):
        assert f.shape[2:] == (128 // 2**k, 192 // 2**k)


def test_pyramid_rejects_indivisible_size(rng):
    net = OASNet(NetConfig())
    with pytest.raises(ValueError, match="multiple of 64"):
        net.extract_pyramid(Tensor(rng.random((1, 3, 64, 96)).astype(np.float32)))


def test_identical_images_identical_pyramids(rng):
    net = OASNet(NetConfig())
    im = images(rng)[0]
    a, b = net.extract_pyramid(im), net.extract_pyramid(Tensor(im.data.copy()))
    for fa, fb in zip(a, b):
        assert fa.data.tobytes() == fb.data.tobytes()


# --------------------------------------------------------------------------- decoder


def test_coarsest_level_starts_from_zero_flow(rng):
    net = OASNet(NetConfig())
    f = Tensor(np.full((1, 160, 1, 1), 0.3, np.float32))
    zero = Tensor(np.zeros((1, 2, 1, 1), np.float32))
    a = cost_volume_sampling(f, f, zero, net.cfg.search).costs.data
    b = cost_volume_warping(f, f, zero, net.cfg.search).costs.data
    assert np.abs(a - b).max() <= 1e-6
    state = net.decode_level(6, f, f, None)
    assert state.flow.shape == (1, 2, 1, 1) and state.occ.shape == (1, 1, 1, 1)


def test_zero_flow_head_passes_upsampled_flow(rng):
    net = OASNet(NetConfig(), seed=2)
    for p in net.params:
        if ".flow." in p.name:
            p.data[...] = 0
    f = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32))
    prev = LevelState(4, Tensor(rng.standard_normal((1, 2, 4, 4)).astype(np.float32)),
                      Tensor(rng.uniform(0.1, 0.9, (1, 1, 4, 4)).astype(np.float32)))
    state = net.decode_level(3, f, f, prev)
    np.testing.assert_array_equal(state.flow.data, ops.upsample_bilinear_2x(prev.flow, 2.0).data)


def test_zero_flow_heads_everywhere_give_zero_flow(rng):
    net = OASNet(NetConfig(), seed=2)
    for p in net.params:
        if ".flow." in p.name:
            p.data[...] = 0
    est = net.estimate_flow(*images(rng))
    assert np.all(est.flow.data == 0)


def test_decode_level_rejects_wrong_prev_resolution(rng):
    net = OASNet(NetConfig())
    f = Tensor(rng.standard_normal((1, 64, 8, 8)).astype(np.float32))
    prev = LevelState(4, Tensor(np.zeros((1, 2, 3, 4), np.float32)), Tensor(np.full((1, 1, 3, 4), 0.5, np.float32)))
    with pytest.raises(ShapeError, match="half"):
        net.decode_level(3, f, f, prev)
    with pytest.raises(ShapeError):
        net.decode_level(3, f, Tensor(np.zeros((1, 64, 8, 7), np.float32)), None)


def test_estimate_flow_shape_contract(rng):
    net = OASNet(NetConfig())
    est = net.estimate_flow(*images(rng, 64, 128, n=2))
    assert est.flow.shape == (2, 2, 64, 128)
    assert len(est.occ_pyramid) == 5 and [s.level for s in est.levels] == [6, 5, 4, 3, 2]
    for s in est.levels:
        assert s.occ.shape[2:] == s.flow.shape[2:] == (64 // 2**s.level, 128 // 2**s.level)
        assert np.all(s.occ.data > 0) and np.all(s.occ.data < 1)


def test_final_flow_is_four_times_upsampled_level_two(rng):
    net = OASNet(NetConfig())
    est = net.estimate_flow(*images(rng))
    up = ops.upsample_bilinear_2x(ops.upsample_bilinear_2x(est.levels[-1].flow, 2.0), 2.0)
    np.testing.assert_array_equal(est.flow.data, up.data)


def test_estimate_flow_deterministic(rng):
    ims = images(rng)
    a = OASNet(NetConfig(), seed=5).estimate_flow(*ims)
    b = OASNet(NetConfig(), seed=5).estimate_flow(*ims)
    assert a.flow.data.tobytes() == b.flow.data.tobytes()


def test_estimate_flow_rejects_mismatched_images(rng):
    net = OASNet(NetConfig())
    with pytest.raises(ShapeError):
        net.estimate_flow(images(rng)[0], images(rng, 128, 64)[0])


def test_occlusion_off_has_no_occ_head(rng):
    net = OASNet(NetConfig(occlusion=False))
    assert "dec2.occ.weight" not in net.params and "dec2.oa.conv.weight" in net.params
    assert net.params["dec2.oa.conv.weight"].shape == init_params(NetConfig())["dec2.oa.conv1.weight"].shape
    est = net.estimate_flow(*images(rng))
    assert all(o is None for o in est.occ_pyramid)


def test_shared_decoder_weight_reaches_every_level(rng):
    net = OASNet(NetConfig(share_decoder=True), seed=1)
    ims = images(rng)
    before = [s.flow.data.copy() for s in net.estimate_flow(*ims).levels]
    net.params["dec.conv4.weight"].data[0, 0, 1, 1] += 0.5
    after = [s.flow.data for s in net.estimate_flow(*ims).levels]
    assert all(np.abs(a - b).max() > 0 for a, b in zip(after, before))


def test_per_level_decoders_are_independent(rng):
    net = OASNet(NetConfig(), seed=1)
    ims = images(rng)
    before = [s.flow.data.copy() for s in net.estimate_flow(*ims).levels]
    net.params["dec3.conv4.weight"].data[0, 0, 1, 1] += 0.5
    after = [s.flow.data for s in net.estimate_flow(*ims).levels]
    changed = [np.abs(a - b).max() > 0 for a, b in zip(after, before)]
    assert changed == [False, False, False, True, True]  # levels 6, 5, 4 untouched


def test_missing_layers_rejected():
    params = init_params(NetConfig(occlusion=False))
    with pytest.raises(KeyError):
        OASNet(NetConfig(occlusion=True), params=params)
