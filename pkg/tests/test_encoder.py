import numpy as np
import pytest
import torch

from tpvformer.encoder import (Backbone, CrossViewHybridAttention, EncoderBlock, EncoderConfig,
                               ImageCrossAttention, ImageFeatures, SamplingHead, TPVFormer,
                               ValueGroup, _join, _split, default_n_ref, encode)
from tpvformer.errors import ConfigError, ContractError, ShapeError
from tpvformer.geometry import VIEWS, CameraRig, TpvGridSpec, make_surround_rig

SPEC = TpvGridSpec(6, 6, 2, 1.0)


def small_config(**kw):
    base = dict(spec=SPEC, channels=8, n_hcab=1, n_hab=1, heads=2, points_per_head=2,
                backbone_channels=(4, 8), cvha_cross=2)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_rig(n=2):
    return make_surround_rig(n, 16, 10)


def randomize_sampler(head, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in (head.offset_proj, head.weight_proj):
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * scale)
            lin.bias.copy_(torch.randn(lin.bias.shape, generator=g) * scale)


# ---------------------------------------------------------------- config

def test_default_n_ref():
    assert default_n_ref(TpvGridSpec(50, 50, 4)) == {"top": 4, "side": 16, "front": 16}
    assert default_n_ref(TpvGridSpec(4, 4, 2)) == {"top": 2, "side": 4, "front": 4}


@pytest.mark.parametrize("kw", [dict(n_hcab=0), dict(n_hab=-1), dict(channels=7), dict(heads=0),
                                dict(points_per_head=0), dict(n_scales=3), dict(cvha_radius=0.5),
                                dict(n_ref={"top": 3, "side": 1, "front": 1}),
                                dict(n_ref={"top": 1})])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        small_config(**kw)


def test_config_dict_roundtrip():
    cfg = small_config(n_scales=2)
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


# ---------------------------------------------------------------- backbone

def test_backbone_shapes_and_strides():
    cfg = small_config(n_scales=2)
    feats = Backbone(cfg)(torch.rand(3, 3, 10, 16))
    assert feats.strides == [2.0, 4.0]
    assert [tuple(t.shape) for t in feats.levels] == [(3, 5, 8, 8), (3, 3, 4, 8)]
    with pytest.raises(ShapeError):
        Backbone(cfg)(torch.rand(3, 10, 16))


# ---------------------------------------------------------------- deformable sampling

def _maps(seed=0, n=2, A=4, B=5, C=4):
    return torch.randn(n, A, B, C, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_zero_init_sampler_is_mean_of_reference_values():
    maps = _maps()
    ref = torch.tensor([[[0.0, 1.0], [2.0, 3.0], [3.0, 4.0]],
                        [[1.0, 1.0], [1.0, 2.0], [0.0, 0.0]]], dtype=torch.float64)
    idx = torch.tensor([0, 1])
    head = SamplingHead(4, 2, 3, 2).double()
    out = head(torch.randn(2, 4, dtype=torch.float64), [ValueGroup(maps, ref, idx)])
    for q in range(2):
        expect = torch.stack([maps[idx[q], int(r[0]), int(r[1])] for r in ref[q]]).mean(0)
        assert torch.allclose(out[q], expect, atol=1e-14)


def test_masked_references_are_ignored():
    maps = _maps(1)
    ref = torch.tensor([[[0.0, 1.0], [2.0, 3.0], [3.0, 4.0]]], dtype=torch.float64)
    mask = torch.tensor([[True, False, True]])
    head = SamplingHead(4, 2, 3, 2).double()
    out = head(torch.randn(1, 4, dtype=torch.float64), [ValueGroup(maps, ref, None, mask)])
    expect = (maps[0, 0, 1] + maps[0, 3, 4]) / 2
    assert torch.allclose(out[0], expect, atol=1e-14)


def test_constant_map_is_reproduced_for_any_offsets_and_weights():
    C = 4
    maps = torch.ones(1, 4, 5, C, dtype=torch.float64) * torch.tensor([1.0, -2.0, 0.5, 3.0], dtype=torch.float64)
    ref = torch.rand(6, 3, 2, dtype=torch.float64) * 4
    head = SamplingHead(C, 2, 3, 4).double()
    randomize_sampler(head, seed=2, scale=2.0)
    out = head(torch.randn(6, C, dtype=torch.float64), [ValueGroup(maps, ref)])
    assert torch.allclose(out, maps[0, 0, 0].expand(6, C), atol=1e-12)


def test_sampler_reference_contracts():
    head = SamplingHead(4, 2, 0, 2)
    with pytest.raises(ContractError, match="at least one"):
        head(torch.randn(2, 4), [ValueGroup(torch.zeros(1, 3, 3, 4), torch.zeros(2, 0, 2))])
    head = SamplingHead(4, 2, 3, 2)
    with pytest.raises(ContractError):
        head(torch.randn(2, 4), [ValueGroup(torch.zeros(1, 3, 3, 4), torch.zeros(2, 2, 2))])


# ---------------------------------------------------------------- ICA

def _queries(cfg, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return {v: torch.randn(*cfg.spec.plane_shape(v), cfg.channels, generator=g, dtype=dtype) for v in VIEWS}


def _features(n_cam, cfg, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageFeatures([torch.randn(n_cam, 5, 8, cfg.channels, generator=g)], [2.0])


def test_ica_unseen_queries_get_zero_update():
    cfg = small_config()
    rig = CameraRig(tiny_rig(4).cameras[:1])  # one camera, looking along +x
    ica = ImageCrossAttention(cfg)
    out = ica(_queries(cfg), _features(1, cfg), rig)
    geo = ica.geometry_for(rig, [2.0])
    seen_any = False
    for view in VIEWS:
        flat = out[view].reshape(-1, cfg.channels)
        unseen = geo[view].n_valid == 0
        assert unseen.any()
        assert torch.equal(flat[unseen], torch.zeros_like(flat[unseen]))
        seen_any |= bool(flat[~unseen].abs().sum() > 0)
    assert seen_any


def test_ica_duplicated_camera_equals_single_camera():
    cfg = small_config()
    cam = tiny_rig(4).cameras[0]
    ica = ImageCrossAttention(cfg)
    feats1 = _features(1, cfg)
    feats2 = ImageFeatures([feats1.levels[0].repeat(2, 1, 1, 1)], [2.0])
    q = _queries(cfg)
    a = ica(q, feats1, CameraRig([cam]))
    b = ica(q, feats2, CameraRig([cam, cam]))
    for v in VIEWS:
        assert torch.allclose(a[v], b[v], atol=1e-6)


def test_ica_camera_permutation_invariance():
    cfg = small_config()
    rig = tiny_rig(3)
    ica = ImageCrossAttention(cfg)
    for s in ica.samplers.values():
        randomize_sampler(s, seed=5)
    feats = _features(3, cfg, seed=1)
    perm = [2, 0, 1]
    q = _queries(cfg, seed=3)
    a = ica(q, feats, rig)
    b = ica(q, ImageFeatures([feats.levels[0][perm]], [2.0]), CameraRig([rig[i] for i in perm]))
    for v in VIEWS:
        assert torch.allclose(a[v], b[v], atol=1e-5)


def test_ica_camera_count_contract():
    cfg = small_config()
    with pytest.raises(ContractError):
        ImageCrossAttention(cfg)(_queries(cfg), _features(2, cfg), tiny_rig(3))


# ---------------------------------------------------------------- CVHA

def test_cvha_constant_queries():
    cfg = small_config()
    cvha = CrossViewHybridAttention(cfg, layer_seed=0)
    for s in cvha.samplers.values():
        randomize_sampler(s, seed=7)
    v = torch.randn(cfg.channels)
    q = {view: v.expand(*cfg.spec.plane_shape(view), cfg.channels).clone() for view in VIEWS}
    out = cvha(q)
    expect = cvha.output_proj(cvha.value_proj(v))
    for view in VIEWS:
        assert torch.allclose(out[view], expect.expand_as(out[view]), atol=1e-5)


def test_cvha_zero_queries_give_output_bias():
    cfg = small_config()
    cvha = CrossViewHybridAttention(cfg, layer_seed=1)
    with torch.no_grad():
        cvha.value_proj.bias.zero_()
        cvha.output_proj.bias.fill_(0.25)
    q = {view: torch.zeros(*cfg.spec.plane_shape(view), cfg.channels) for view in VIEWS}
    for t in cvha(q).values():
        assert torch.equal(t, torch.full_like(t, 0.25))


def test_cvha_references_reach_all_planes():
    cfg = small_config()
    cvha = CrossViewHybridAttention(cfg, layer_seed=0)
    for view in VIEWS:
        groups = cvha.reference_groups(view)
        assert set(groups) == set(VIEWS)
        Q = np.prod(cfg.spec.plane_shape(view))
        assert all(g.shape[0] == Q and g.shape[1] >= 1 for g in groups.values())


# ---------------------------------------------------------------- blocks and encoder

def test_split_join_roundtrip():
    x = torch.randn(36 + 12 + 12, 3)
    assert torch.equal(_join(_split(x, SPEC)), x)


@pytest.mark.parametrize("with_ica", [True, False])
def test_block_with_zero_outputs_is_identity(with_ica):
    cfg = small_config(bypass_norm=True, zero_init_outputs=True)
    model = TPVFormer(cfg)
    block = model.blocks[0] if with_ica else model.blocks[-1]
    assert block.with_ica == with_ica
    x = torch.randn(60, cfg.channels)
    feats = _features(2, cfg)
    out = block(x, feats, tiny_rig(2)) if with_ica else block(x)
    assert torch.equal(out, x)


def test_hcab_needs_images():
    model = TPVFormer(small_config())
    with pytest.raises(ContractError):
        model.blocks[0](torch.randn(60, 8))


def test_encode_shapes_and_determinism():
    cfg = small_config()
    rig = tiny_rig(2)
    images = torch.rand(2, 3, 10, 16, generator=torch.Generator().manual_seed(0))
    a = encode(images, rig, cfg)
    b = encode(images, rig, cfg)
    assert a.hw.shape == (6, 6, 8) and a.dh.shape == (2, 6, 8) and a.wd.shape == (6, 2, 8)
    assert all(torch.equal(x, y) for x, y in zip(a.as_dict().values(), b.as_dict().values()))
    c = encode(images, rig, small_config(seed=1))
    assert not torch.equal(a.hw, c.hw)


def test_every_parameter_receives_gradient():
    cfg = small_config(n_scales=2)
    model = TPVFormer(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.startswith("pos_"):
                p.normal_(0, 0.1)
    # zero-initialised samplers make ICA blind to its query until the first update
    for i, mod in enumerate(m for m in model.modules() if isinstance(m, SamplingHead)):
        randomize_sampler(mod, seed=i, scale=0.1)
    images = torch.rand(2, 3, 10, 16, generator=torch.Generator().manual_seed(1))
    planes = model(images, tiny_rig(2))
    target = torch.randn(planes.hw.shape, generator=torch.Generator().manual_seed(2))
    loss = sum((t * torch.randn_like(t)).sum() for t in planes.as_dict().values()) + (planes.hw * target).sum()
    loss.backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
    assert dead == []


def test_full_depth_on_large_grid():
    spec = TpvGridSpec(100, 100, 8, 0.5)
    cfg = EncoderConfig(spec=spec, channels=8, n_hcab=3, n_hab=2, heads=2, points_per_head=2,
                        backbone_channels=(4, 8), cvha_cross=2)
    model = TPVFormer(cfg)
    assert sum(b.with_ica for b in model.blocks) == 3 and len(model.blocks) == 5
    with torch.no_grad():
        planes = model(torch.rand(6, 3, 10, 16), make_surround_rig(6, 16, 10))
    assert planes.hw.shape == (100, 100, 8) and planes.dh.shape == (8, 100, 8)
    assert all(torch.isfinite(t).all() for t in planes.as_dict().values())
