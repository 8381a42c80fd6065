import numpy as np
import pytest
import torch
import torch.nn.functional as F

from pointnu.config import VARIANTS
from pointnu.model import (JPFM, HRBackbone, ModelConfig, build_model, coord_channels, count_parameters,
                           fuse_multiscale, load_checkpoint, receptive_field, save_checkpoint)

SMALL = dict(num_classes=3, kernel_dim=64, jpfm_branch_channels=16, jpfm_out_channels=32, head_channels=32,
             head_depth=2, feature_channels=16, gn_groups=8)


def test_backbone_shapes():
    bb = HRBackbone(16, groups=8)
    feats = bb(torch.zeros(1, 3, 64, 64))
    assert [tuple(f.shape[1:]) for f in feats] == [(16, 16, 16), (32, 8, 8), (64, 4, 4), (128, 2, 2)]
    assert bb(torch.zeros(1, 3, 256, 256))[0].shape[-2:] == (64, 64)


def test_backbone_rejects_unpadded():
    with pytest.raises(ValueError, match="pad"):
        HRBackbone(16, groups=8)(torch.zeros(1, 3, 40, 64))


def test_backbone_deterministic():
    torch.manual_seed(0)
    bb = HRBackbone(16, groups=8).eval()
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        a, b = bb(x), bb(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


class TestFuse:
    def test_channels(self):
        feats = [torch.zeros(1, c, s, s) for c, s in ((16, 16), (32, 8), (64, 4), (128, 2))]
        assert fuse_multiscale(feats).shape == (1, 240, 16, 16)

    def test_constant(self):
        feats = [torch.full((1, c, s, s), 3.0) for c, s in ((2, 16), (4, 8), (8, 4), (16, 2))]
        assert torch.all(fuse_multiscale(feats) == 3.0)

    def test_delta_bilinear_stencil(self):
        # half-pixel-centred bilinear upsampling by 2 of a unit delta
        coarse = torch.zeros(1, 1, 8, 8)
        coarse[0, 0, 3, 4] = 1.0
        fine = [torch.zeros(1, 1, 16, 16), coarse, torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2)]
        out = fuse_multiscale(fine)[0, 1].numpy()

        def hat(u, c):  # 1-D tent weight of source cell c at fine coordinate u
            src = (u + 0.5) / 2 - 0.5
            src = np.clip(src, 0, 7)
            return np.maximum(0, 1 - np.abs(src - c))

        u = np.arange(16)
        expect = np.outer(hat(u, 3), hat(u, 4))
        np.testing.assert_allclose(out, expect, atol=1e-6)


class TestJPFM:
    def test_shape_and_defaults(self):
        j = JPFM(40, groups=8)
        assert j(torch.zeros(1, 40, 13, 7)).shape == (1, 256, 13, 7)

    def test_receptive_field(self):
        # every dilated path after the 3x3 tap keeps the spatial grid; d=8 spans 17 stride-4 cells
        assert receptive_field(8) == 17 and receptive_field(8) * 4 == 68
        # empirical: impulse response of the d=8 path
        j = JPFM(1, 1, 1, dilations=(8,), groups=1)
        conv = j.paths[0][0]
        with torch.no_grad():
            conv.weight.fill_(1.0)
        x = torch.zeros(1, 1, 41, 41)
        x[0, 0, 20, 20] = 1.0
        resp = F.conv2d(x, conv.weight, padding=8, dilation=8)[0, 0]
        ys, xs = torch.nonzero(resp, as_tuple=True)
        assert int(ys.max() - ys.min()) + 1 == 17 and int(xs.max() - xs.min()) + 1 == 17


def test_coord_channels():
    c = coord_channels(2, 4, 5)
    assert torch.all(c[:, 0, :, 0] == -1) and torch.all(c[:, 0, :, -1] == 1)
    assert torch.all(c[:, 1, 0] == -1) and torch.all(c[:, 1, -1] == 1)


def test_forward_shapes():
    m = build_model(ModelConfig(**SMALL), seed=0).eval()
    with torch.no_grad():
        out = m(torch.zeros(1, 3, 64, 64))
    assert out.heatmap.shape == (1, 3, 16, 16)
    assert out.kernels.shape == (1, 64, 16, 16)
    assert out.features.shape == (1, 64, 64, 64)
    assert torch.all((out.heatmap > 0) & (out.heatmap < 1))


def test_zero_logits_half():
    m = build_model(ModelConfig(**SMALL), seed=0).eval()
    with torch.no_grad():
        m.heatmap_out.weight.zero_()
        m.heatmap_out.bias.zero_()
        out = m(torch.randn(1, 3, 64, 64))
    assert torch.all(out.heatmap == 0.5)


@pytest.mark.parametrize("neck", ["jpfm-unshared", "jpfm-shared", "fpn", "aspp"])
@pytest.mark.parametrize("segmentor", ["dynamic", "standard"])
def test_every_parameter_gets_gradient(neck, segmentor):
    from pointnu.losses import total_loss
    from pointnu.targets import render_heatmap

    from conftest import square_annotation

    cfg = ModelConfig(**{**SMALL, "num_classes": 2, "kernel_dim": 8}, neck=neck, segmentor=segmentor)
    m = build_model(cfg, seed=0)
    if segmentor == "standard":
        m._standard_head(16 * 16)
    ann = square_annotation((64, 64), [(4, 4, 20, 20), (30, 30, 50, 56)], [1, 2])
    x = torch.randn(1, 3, 64, 64, generator=torch.Generator().manual_seed(1))
    lb = total_loss(m(x), [render_heatmap(ann)], [ann])
    lb.total.backward()
    for name, p in m.named_parameters():
        assert p.grad is not None, name
        assert torch.isfinite(p.grad).all(), name
        assert p.grad.abs().sum() > 0, name


def test_variant_parameter_order():
    counts = {}
    for v, over in VARIANTS.items():
        counts[v] = count_parameters(build_model(ModelConfig(**{**ModelConfig().to_dict(), **over}), seed=0))
    assert counts["S"] < counts["M"] < counts["default"]


def test_checkpoint_round_trip(tmp_path):
    m = build_model(ModelConfig(**SMALL), seed=0)
    p = save_checkpoint(tmp_path / "m.pt", m, {"epoch": 3})
    m2, payload = load_checkpoint(p)
    assert payload["version"] == 1 and payload["epoch"] == 3
    x = torch.randn(1, 3, 64, 64)
    with torch.no_grad():
        assert torch.equal(m.eval()(x).heatmap, m2(x).heatmap)


def test_checkpoint_rejects_foreign(tmp_path):
    torch.save({"weights": 1}, tmp_path / "x.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.pt")
