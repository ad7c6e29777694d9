import numpy as np
import pytest
import torch

from maskanim.core import (
    ConfigError,
    Frame,
    Mask,
    PipelineConfig,
    VideoClip,
    downscale,
    load_frame_png,
    load_mask_png,
    save_frame_png,
    save_mask_png,
    upscale,
)


def reference_resample(img: np.ndarray, n_out: int) -> np.ndarray:
    """Independent naive-loop triangle resampler (half-pixel centers)."""
    n_in = img.shape[-1]
    scale = n_out / n_in
    f = min(scale, 1.0)
    out = np.zeros(img.shape[:-2] + (n_out, n_out))

    def axis_weights(j):
        center = (j + 0.5) / scale
        pairs = []
        for i in range(n_in):
            w = max(0.0, 1.0 - abs((i + 0.5 - center) * f))
            if w > 0:
                pairs.append((i, w))
        total = sum(w for _, w in pairs)
        return [(i, w / total) for i, w in pairs]

    for jy in range(n_out):
        wy = axis_weights(jy)
        for jx in range(n_out):
            wx = axis_weights(jx)
            acc = np.zeros(img.shape[:-2])
            for iy, vy in wy:
                for ix, vx in wx:
                    acc = acc + vy * vx * img[..., iy, ix]
            out[..., jy, jx] = acc
    return out


class TestTypes:
    def test_frame_validation(self):
        Frame(torch.rand(3, 64, 64))
        with pytest.raises(ValueError):
            Frame(torch.rand(1, 64, 64))
        with pytest.raises(ValueError):
            Frame(torch.rand(3, 64, 32))
        with pytest.raises(ValueError):
            Frame(torch.rand(3, 48, 48))  # not a power of two
        with pytest.raises(ValueError):
            Frame(torch.full((3, 64, 64), 1.5))

    def test_mask_validation(self):
        Mask(torch.rand(1, 16, 16))
        with pytest.raises(ValueError):
            Mask(torch.rand(3, 16, 16))
        with pytest.raises(ValueError):
            Mask(torch.rand(1, 16, 16) - 1.0)

    def test_clip_resolution_consistency(self):
        frames = (Frame(torch.rand(3, 32, 32)), Frame(torch.rand(3, 32, 32)))
        clip = VideoClip("v", frames)
        assert len(clip) == 2 and clip.resolution == 32
        with pytest.raises(ValueError):
            VideoClip("v", (frames[0], Frame(torch.rand(3, 64, 64))))


class TestDownscale:
    def test_constant_is_fixed_point(self):
        f = Frame(torch.full((3, 256, 256), 0.7))
        out = downscale(f, 64)
        assert torch.equal(out.data, torch.full((3, 64, 64), 0.7))

    def test_shape_contract_256_to_64(self):
        out = downscale(Frame(torch.rand(3, 256, 256)), 64)
        assert out.data.shape == (3, 64, 64)

    def test_checkerboard_average(self):
        # direct arithmetic oracle: (0 + 1 + 1 + 0) / 4
        cb = Mask(torch.tensor([[[0.0, 1.0], [1.0, 0.0]]]))
        out = downscale(cb, 1)
        assert out.data.item() == pytest.approx(0.5, abs=1e-12)

    def test_invalid_target(self):
        m = Mask(torch.rand(1, 64, 64))
        with pytest.raises(ValueError):
            downscale(m, 0)
        with pytest.raises(ValueError):
            downscale(m, 128)

    def test_matches_reference_resampler(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(size=(1, 16, 16))
        ours = downscale(torch.from_numpy(img), 4).numpy()
        ref = reference_resample(img, 4)
        np.testing.assert_allclose(ours, ref, atol=1e-12)


class TestUpscale:
    def test_constant_is_fixed_point(self):
        out = upscale(Mask(torch.full((1, 64, 64), 0.3)), 256)
        assert torch.equal(out.data, torch.full((1, 256, 256), 0.3))

    def test_shape_contract_64_to_256(self):
        out = upscale(Mask(torch.rand(1, 64, 64)), 256)
        assert out.data.shape == (1, 256, 256)

    def test_invalid_target(self):
        with pytest.raises(ValueError):
            upscale(Mask(torch.rand(1, 64, 64)), 32)

    def test_single_pixel_brightness_preserved(self):
        # independent reference resampler computes both sums
        img = np.zeros((1, 64, 64))
        img[0, 32, 32] = 1.0
        ours = upscale(torch.from_numpy(img), 256).numpy()
        ref = reference_resample(img, 256)
        np.testing.assert_allclose(ours, ref, atol=1e-12)
        # area-normalized brightness: 16 output pixels per input pixel
        ratio = ours.sum() / (img.sum() * 16.0)
        assert abs(ratio - 1.0) <= 0.05
        # the bump is a smooth widened tent, roughly 4x wider than the pixel
        ys, xs = np.nonzero(ours[0])
        assert 4 <= xs.max() - xs.min() + 1 <= 12

    def test_matches_reference_resampler(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(size=(3, 8, 8))
        ours = upscale(torch.from_numpy(img), 32).numpy()
        ref = reference_resample(img, 32)
        np.testing.assert_allclose(ours, ref, atol=1e-12)


class TestResamplingInvariants:
    def test_range_preservation_randomized(self):
        g = torch.Generator().manual_seed(3)
        for _ in range(20):
            x = torch.rand(1, 64, 64, generator=g)
            down = downscale(Mask(x), 16).data
            up = upscale(Mask(x), 128).data
            assert down.min() >= 0 and down.max() <= 1
            assert up.min() >= 0 and up.max() <= 1

    def test_down_then_up_restores_resolution(self):
        m = Mask(torch.rand(1, 64, 64))
        assert upscale(downscale(m, 16), 64).resolution == 64

    def test_determinism(self):
        x = torch.rand(3, 128, 128)
        a = downscale(Frame(x), 32).data
        b = downscale(Frame(x), 32).data
        assert torch.equal(a, b)

    def test_resampling_is_differentiable(self):
        # the loss pyramid backpropagates through downscale; check one pixel
        # of the gradient against central differences
        x = torch.rand(1, 8, 8, dtype=torch.float64).requires_grad_(True)
        downscale(x, 4).sum().backward()
        assert x.grad is not None and torch.isfinite(x.grad).all()
        eps = 1e-6
        with torch.no_grad():
            orig = x[0, 3, 3].item()
            x[0, 3, 3] = orig + eps
            up = float(downscale(x, 4).sum())
            x[0, 3, 3] = orig - eps
            down = float(downscale(x, 4).sum())
            x[0, 3, 3] = orig
        assert (up - down) / (2 * eps) == pytest.approx(x.grad[0, 3, 3].item(), rel=1e-6)


class TestPipelineConfig:
    def test_defaults_valid(self):
        cfg = PipelineConfig()
        assert cfg.frame_resolution == 256 and cfg.mask_resolution == 64
        assert cfg.reconstruction_scales == (256, 128, 64)

    def test_mask_frame_relation_enforced(self):
        with pytest.raises(ConfigError):
            PipelineConfig(frame_resolution=256, mask_resolution=32)

    def test_toy_config(self):
        cfg = PipelineConfig.toy()
        assert cfg.frame_resolution == 64 and cfg.mask_resolution == 16
        assert cfg.reconstruction_scales == (64, 32, 16)

    def test_file_roundtrip(self, tmp_path):
        cfg = PipelineConfig.toy(seed=12, learning_rate=1e-3)
        path = tmp_path / "c.ini"
        cfg.write_file(path)
        loaded = PipelineConfig.from_file(path)
        assert loaded.to_dict() == cfg.to_dict()

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            PipelineConfig.toy().with_overrides({"bogus": "1"})

    def test_fingerprint_tracks_structure(self):
        a = PipelineConfig.toy()
        b = PipelineConfig.toy(base_channels=16)
        c = PipelineConfig.toy(seed=99)
        assert a.structural_fingerprint() != b.structural_fingerprint()
        assert a.structural_fingerprint() == c.structural_fingerprint()


class TestPngIO:
    def test_frame_roundtrip(self, tmp_path):
        f = Frame(torch.rand(3, 32, 32))
        save_frame_png(f, tmp_path / "f.png")
        loaded = load_frame_png(tmp_path / "f.png")
        assert (loaded.data - f.data).abs().max() <= 0.5 / 255 + 1e-6

    def test_mask_roundtrip_binary_exact(self, tmp_path):
        m = Mask((torch.rand(1, 32, 32) > 0.5).float())
        save_mask_png(m, tmp_path / "m.png")
        loaded = load_mask_png(tmp_path / "m.png")
        assert torch.equal(loaded.data, m.data)
