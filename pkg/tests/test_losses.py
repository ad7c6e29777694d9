import numpy as np
import pytest
import torch

from maskanim.core import Frame, Mask, PipelineConfig
from maskanim.losses import (
    LossReport,
    StubFeatureExtractor,
    combined_loss,
    make_feature_extractor,
    mask_loss,
    perceptual_layer_loss,
    perceptual_pyramid_loss,
    reconstruction_loss,
)


class TestMaskLoss:
    def test_identical_masks_zero(self):
        m = Mask(torch.rand(1, 16, 16))
        assert float(mask_loss(m, m)) == 0.0

    def test_zeros_vs_ones(self):
        a = Mask(torch.zeros(1, 8, 8))
        b = Mask(torch.ones(1, 8, 8))
        assert float(mask_loss(a, b)) == pytest.approx(1.0)

    def test_hand_sum(self):
        a = Mask(torch.zeros(1, 2, 2))
        b = Mask(torch.tensor([[[0.2, 0.0], [0.0, 0.6]]]))
        # hand sum: (0.2 + 0.6) / 4
        assert float(mask_loss(a, b)) == pytest.approx(0.2, abs=1e-7)

    def test_resolution_mismatch(self):
        with pytest.raises(ValueError):
            mask_loss(Mask(torch.rand(1, 8, 8)), Mask(torch.rand(1, 16, 16)))


class TestPerceptualLayerLoss:
    def test_equal_inputs_zero_every_layer(self):
        ex = StubFeatureExtractor((1, 2, 4))
        f = Frame(torch.rand(3, 16, 16))
        for j in range(ex.num_layers):
            assert float(perceptual_layer_loss(ex, f, f, j)) == 0.0

    def test_identity_layer_reduces_to_pixel_l1(self):
        ex = StubFeatureExtractor((1,))
        a = Frame(torch.zeros(3, 16, 16))
        b = Frame(torch.full((3, 16, 16), 0.5))
        assert float(perceptual_layer_loss(ex, a, b, 0)) == pytest.approx(0.5, abs=1e-7)

    def test_identity_stub_matches_pixel_l1_random(self):
        ex = StubFeatureExtractor((1,))
        g = torch.Generator().manual_seed(30)
        for _ in range(20):
            a = torch.rand(3, 16, 16, generator=g)
            b = torch.rand(3, 16, 16, generator=g)
            ours = float(perceptual_layer_loss(ex, a, b, 0))
            ref = float((a - b).abs().mean())
            assert ours == pytest.approx(ref, abs=1e-6)

    def test_pyramid_layer_matches_block_mean_oracle(self):
        # independent block-mean oracle via numpy reshape
        ex = StubFeatureExtractor((1, 2))
        g = torch.Generator().manual_seed(31)
        a = torch.rand(3, 16, 16, generator=g)
        b = torch.rand(3, 16, 16, generator=g)

        def block2(x):
            return x.numpy().reshape(3, 8, 2, 8, 2).mean(axis=(2, 4))

        ref = float(np.abs(block2(a) - block2(b)).mean())
        assert float(perceptual_layer_loss(ex, a, b, 1)) == pytest.approx(ref, abs=1e-6)

    def test_layer_out_of_range(self):
        ex = StubFeatureExtractor((1,))
        f = Frame(torch.rand(3, 16, 16))
        with pytest.raises(ValueError):
            perceptual_layer_loss(ex, f, f, 3)

    def test_gradient_matches_finite_differences(self):
        # relative 1e-3 at 10 sampled pixels, float64 for FD stability
        ex = StubFeatureExtractor((1,))
        g = torch.Generator().manual_seed(32)
        a = torch.rand(3, 16, 16, generator=g, dtype=torch.float64).requires_grad_(True)
        b = torch.rand(3, 16, 16, generator=g, dtype=torch.float64)
        loss = perceptual_layer_loss(ex, a, b, 0)
        loss.backward()
        flat_idx = torch.randperm(a.numel(), generator=g)[:10]
        eps = 1e-6
        for fi in flat_idx.tolist():
            idx = np.unravel_index(fi, a.shape)
            if abs(a.detach()[idx] - b[idx]) < 5 * eps:
                continue  # |.| kink: FD invalid within eps of the crossing
            with torch.no_grad():
                orig = a[idx].item()
                a[idx] = orig + eps
                up = float(perceptual_layer_loss(ex, a, b, 0))
                a[idx] = orig - eps
                down = float(perceptual_layer_loss(ex, a, b, 0))
                a[idx] = orig
            fd = (up - down) / (2 * eps)
            assert fd == pytest.approx(a.grad[idx].item(), rel=1e-3)


class TestReconstructionLoss:
    def test_all_equal_zero(self):
        ex = StubFeatureExtractor((1, 2, 4))
        d = Frame(torch.rand(3, 64, 64))
        total, breakdown = reconstruction_loss(ex, d, d, d, scales=(64, 32, 16))
        assert float(total) == 0.0
        assert all(float(v) == 0.0 for v in breakdown.values())

    def test_single_term_reduction(self):
        # identity stub, one layer, one scale, c == d: total is the f-branch L1
        ex = StubFeatureExtractor((1,))
        g = torch.Generator().manual_seed(33)
        d = torch.rand(3, 256, 256, generator=g)
        f = (d + 0.1).clamp(0, 1)
        total, breakdown = reconstruction_loss(ex, d, f, d, scales=(64,))
        from maskanim.core import downscale

        f64 = downscale(f, 64)
        d64 = downscale(d, 64)
        ref = float((f64 - d64).abs().mean())
        assert float(total) == pytest.approx(ref, abs=1e-6)
        assert float(breakdown[(64, 0, "c")]) == 0.0

    def test_breakdown_has_18_entries(self):
        ex = StubFeatureExtractor((1, 2, 4))
        d = Frame(torch.rand(3, 64, 64))
        _total, breakdown = reconstruction_loss(ex, d, d, d, scales=(64, 32, 16))
        assert len(breakdown) == 3 * 3 * 2

    def test_pyramid_branch_totals_sum(self):
        ex = StubFeatureExtractor((1, 2))
        g = torch.Generator().manual_seed(34)
        c = torch.rand(3, 64, 64, generator=g)
        f = torch.rand(3, 64, 64, generator=g)
        d = torch.rand(3, 64, 64, generator=g)
        total, _ = reconstruction_loss(ex, c, f, d, scales=(64, 32))
        tc, _ = perceptual_pyramid_loss(ex, c, d, scales=(64, 32))
        tf, _ = perceptual_pyramid_loss(ex, f, d, scales=(64, 32))
        assert float(total) == pytest.approx(float(tc) + float(tf), rel=1e-6)


class TestCombinedLoss:
    def test_published_weights_exact(self):
        assert combined_loss(0.01, 0.1, 100, 10) == 2.0

    def test_zero(self):
        assert combined_loss(0.0, 0.0, 100, 10) == 0.0

    def test_linearity(self):
        g = torch.Generator().manual_seed(35)
        for _ in range(10):
            x = float(torch.rand((), generator=g))
            assert combined_loss(x, 0.0, 100, 10) == pytest.approx(100 * x)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            combined_loss(0.1, 0.1, -1, 10)


class TestLossReport:
    def test_total_identity_exact(self):
        report = LossReport.build(0.01, 0.1, 100.0, 10.0)
        assert report.total == 100.0 * report.mask_loss + 10.0 * report.reconstruct_loss

    def test_flat_serialization(self):
        report = LossReport.build(0.5, 1.5, 2.0, 3.0, {(64, 0, "c"): 0.25, (64, 0, "f"): 1.25})
        flat = report.to_flat()
        assert flat["loss_mask"] == 0.5
        assert flat["loss_total"] == 2.0 * 0.5 + 3.0 * 1.5
        assert flat["vgg_s64_l0_c"] == 0.25


class TestExtractorSelection:
    def test_stub_by_default(self):
        ex = make_feature_extractor(PipelineConfig.toy())
        assert isinstance(ex, StubFeatureExtractor)
        assert ex.num_layers == 3

    def test_stub_deterministic(self):
        ex = StubFeatureExtractor((1, 2, 4))
        x = torch.rand(1, 3, 16, 16)
        a = ex.feature_maps(x)
        b = ex.feature_maps(x)
        assert all(torch.equal(u, v) for u, v in zip(a, b))

    def test_vgg_requires_weights_file(self, tmp_path, monkeypatch):
        from maskanim.core import ConfigError
        from maskanim.losses import VggFeatureExtractor

        with pytest.raises((ConfigError, FileNotFoundError, RuntimeError)):
            VggFeatureExtractor(tmp_path / "missing.pt")


def _fake_vgg19_state(rng):
    """Random weights in the common pretrained layout (keys features.N.*)."""
    convs = [
        (0, 3, 64), (2, 64, 64),
        (5, 64, 128), (7, 128, 128),
        (10, 128, 256), (12, 256, 256), (14, 256, 256), (16, 256, 256),
        (19, 256, 512), (21, 512, 512), (23, 512, 512), (25, 512, 512),
        (28, 512, 512),
    ]
    state = {}
    for idx, cin, cout in convs:
        state[f"features.{idx}.weight"] = torch.randn(cout, cin, 3, 3, generator=rng) * 0.01
        state[f"features.{idx}.bias"] = torch.zeros(cout)
    return state


@pytest.fixture(scope="module")
def vgg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("vgg") / "vgg19.pt"
    torch.save(_fake_vgg19_state(torch.Generator().manual_seed(50)), path)
    return path


class TestVggAdapter:
    def test_taps_and_shapes(self, vgg_file):
        from maskanim.losses import VggFeatureExtractor

        ex = VggFeatureExtractor(vgg_file, layer_indices=(1, 11, 29))
        feats = ex.feature_maps(torch.rand(1, 3, 64, 64))
        assert [tuple(f.shape) for f in feats] == [
            (1, 64, 64, 64),
            (1, 256, 16, 16),
            (1, 512, 4, 4),
        ]

    def test_deterministic_and_equal_inputs_zero(self, vgg_file):
        from maskanim.losses import VggFeatureExtractor

        ex = VggFeatureExtractor(vgg_file)
        x = torch.rand(1, 3, 32, 32)
        a = ex.feature_maps(x)
        b = ex.feature_maps(x)
        assert all(torch.equal(u, v) for u, v in zip(a, b))
        assert float(perceptual_layer_loss(ex, x, x, 2)) == 0.0

    def test_env_var_selects_vgg(self, vgg_file, monkeypatch):
        from maskanim.losses import VGG_WEIGHTS_ENV, VggFeatureExtractor, make_feature_extractor

        monkeypatch.setenv(VGG_WEIGHTS_ENV, str(vgg_file))
        ex = make_feature_extractor(PipelineConfig.toy())
        assert isinstance(ex, VggFeatureExtractor)
