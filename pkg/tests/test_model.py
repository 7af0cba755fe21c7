from dataclasses import replace

import numpy as np
import pytest
import torch

from mftcnet.aperture import build_aperture_pyramid
from mftcnet.model import (
    MFTCNet,
    ModelConfig,
    center_insert,
    count_parameters,
    param_count,
    swin_encoder_params,
    component_sweep,
)
from mftcnet.swin3d import SwinConfig


@pytest.fixture(scope="module")
def desk_model():
    torch.manual_seed(0)
    return MFTCNet(ModelConfig.desk()).double().eval()


def test_output_shape(desk_model):
    x = torch.randn(2, 1, 32, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        out = desk_model(x)
    assert out.shape == (2, 9, 32, 32, 32)


def test_deterministic(desk_model):
    x = torch.randn(1, 1, 32, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        assert torch.equal(desk_model(x), desk_model(x))
        assert torch.equal(desk_model(x), desk_model(build_aperture_pyramid(x, 4)))


def test_wrong_input_size(desk_model):
    with pytest.raises(ValueError):
        desk_model(torch.zeros(1, 1, 16, 16, 16, dtype=torch.float64))


def test_single_aperture_is_plain_encoder_decoder():
    cfg = ModelConfig.desk(apertures=1, fusion_enabled=False)
    torch.manual_seed(1)
    m = MFTCNet(cfg).double()
    assert len(m.encoders) == 1 and m.fusions is None
    assert count_parameters(m) == swin_encoder_params(cfg.swin, 2) + count_parameters(m.decoder)
    x = torch.randn(1, 1, 32, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        feats = m.encode(build_aperture_pyramid(x, 1))
        assert torch.equal(m.decode(feats, x), m.decoder(feats[0], x))


def test_insertion_regions_follow_offsets(desk_model):
    x = torch.randn(1, 1, 32, 32, 32, dtype=torch.float64)
    pyr = build_aperture_pyramid(x, 4)
    with torch.no_grad():
        feats = desk_model.encode(pyr)
    p = desk_model.cfg.swin.patch_size
    for k in range(1, 4):
        for s, m in enumerate(feats[k]):
            scale = p * 2**s
            off = tuple(o // scale for o in pyr.offsets[k])
            base = torch.zeros_like(feats[0][s])
            out = center_insert(base, m)
            n = m.shape[-1]
            sl = (Ellipsis, slice(off[0], off[0] + n), slice(off[1], off[1] + n), slice(off[2], off[2] + n))
            assert torch.equal(out[sl], m)
            assert torch.count_nonzero(out) == torch.count_nonzero(m)


def test_center_insert_errors():
    with pytest.raises(ValueError):
        center_insert(torch.zeros(1, 1, 5, 5, 5), torch.zeros(1, 1, 2, 2, 2))


def test_zeroing_smallest_aperture_is_local(desk_model):
    torch.manual_seed(2)
    x = torch.randn(1, 1, 32, 32, 32, dtype=torch.float64)
    with torch.no_grad():
        feats = desk_model.encode(build_aperture_pyramid(x, 4))
        ref = desk_model.decode(feats, x)
        feats[3] = [torch.zeros_like(m) for m in feats[3]]
        out = desk_model.decode(feats, x)
    diff = (out - ref).abs().sum(1)[0]
    # aperture 4 sits at offset 7, extent 2 on the 16^3 grid; two 3^3 convs there,
    # a stride-2 transposed conv, then two more 3^3 convs at full resolution
    inside = torch.zeros_like(diff, dtype=torch.bool)
    inside[8:24, 8:24, 8:24] = True
    assert diff[inside].max() > 0
    assert diff[~inside].max() == 0


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig.desk(),
        ModelConfig.desk(apertures=2, fusion_enabled=False),
        ModelConfig.desk(share_weights=True),
        ModelConfig.desk(decoder_channels=()),
        ModelConfig.desk(swin=SwinConfig(embed_dim=8, patch_size=2, depths=(1, 2), num_heads=(2, 2), window_size=2, qkv_bias=False), se_reduction=2),
    ],
)
def test_param_formula_matches_enumeration(cfg):
    assert param_count(cfg) == count_parameters(MFTCNet(cfg))


def test_param_formula_full_scale():
    cfg = ModelConfig.full()
    assert param_count(cfg) == count_parameters(MFTCNet(cfg))


def test_zero_decoder_is_encoder_only():
    cfg = ModelConfig.desk(decoder_channels=(), fusion_enabled=False)
    assert param_count(cfg) == sum(swin_encoder_params(cfg.swin, s) for s in cfg.aperture_stages())
    with pytest.raises(RuntimeError):
        MFTCNet(cfg)(torch.zeros(1, 1, 32, 32, 32))


def test_attention_projection_quadruples():
    counts = []
    for c in (12, 24):
        sw = SwinConfig(embed_dim=c, depths=(1,), num_heads=(1,), qkv_bias=False)
        m = MFTCNet(ModelConfig.desk(swin=sw, apertures=1, fusion_enabled=False, decoder_channels=(), input_size=8))
        attn = m.encoders[0].stages[0].blocks[0].attn
        n = attn.qkv.weight.numel() + attn.proj.weight.numel()
        assert n == 4 * c * c
        counts.append(n)
    assert counts[1] == 4 * counts[0]


@pytest.mark.parametrize("base", [ModelConfig.desk(), ModelConfig.full()])
def test_component_sweep_strictly_increasing(base):
    counts = [param_count(c) for _, c in component_sweep(base)]
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.desk(input_size=24).validate()
    with pytest.raises(ValueError):
        ModelConfig.desk(decoder_channels=(16, 24)).validate()
    with pytest.raises(ValueError):
        ModelConfig.desk(apertures=5).validate()
    with pytest.raises(ValueError, match="aligned"):
        ModelConfig.desk(input_size=16).validate()


def test_backward_reaches_every_aperture():
    torch.manual_seed(3)
    m = MFTCNet(ModelConfig.desk())
    m(torch.randn(1, 1, 32, 32, 32)).square().mean().backward()
    for enc in m.encoders:
        assert enc.patch_embed.proj.weight.grad.abs().sum() > 0
    for f in m.fusions:
        assert f.proj.weight.grad.abs().sum() > 0
