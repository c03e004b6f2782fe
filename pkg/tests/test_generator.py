import pytest
import torch

from leakseg.errors import ConfigError
from leakseg.generator import LADDER_SIZES, NoiseBatch, PatchGenerator, sample_noise


def make_generator(width=32, channels=1, seed=0, dtype=torch.float32):
    g = PatchGenerator(out_channels=channels, base_width=width)
    g.init_weights(torch.Generator().manual_seed(seed))
    return g.to(dtype)


class TestSampleNoise:
    def test_shape(self):
        assert sample_noise(4, seed=0).z.shape == (4, 100)

    def test_deterministic(self):
        assert torch.equal(sample_noise(3, seed=5).z, sample_noise(3, seed=5).z)

    def test_standard_normal_moments(self):
        z = sample_noise(10000, seed=1).z
        assert abs(float(z.mean())) < 0.05
        assert 0.97 <= float(z.std()) <= 1.03

    def test_batch_must_be_positive(self):
        with pytest.raises(ConfigError):
            sample_noise(0, seed=0)


class TestGenerate:
    def test_output_shapes_and_ladder(self):
        g = make_generator()
        acts = g(sample_noise(2, seed=0))
        assert acts.fake_image.pixels.shape == (2, 1, 64, 64)
        assert acts.spatial_sizes() == LADDER_SIZES

    def test_ladder_sizes_independent_of_batch(self):
        g = make_generator()
        for batch in (1, 3):
            acts = g(sample_noise(batch, seed=batch))
            assert acts.spatial_sizes() == (8, 16, 32, 64)

    def test_default_ladder_channels(self):
        g = PatchGenerator(out_channels=3)
        assert g.ladder_channels == (512, 256, 128, 64)

    def test_tanh_range_and_finite(self):
        g = make_generator()
        g.eval()
        with torch.no_grad():
            for trial in range(100):
                acts = g(sample_noise(2, seed=trial))
                pixels = acts.fake_image.pixels
                assert torch.isfinite(pixels).all()
                assert float(pixels.abs().max()) <= 1.0

    def test_eval_mode_deterministic(self):
        g = make_generator()
        g.eval()
        z = sample_noise(2, seed=3)
        assert torch.equal(g(z).fake_image.pixels, g(z).fake_image.pixels)

    def test_width_must_be_multiple_of_eight(self):
        with pytest.raises(ConfigError):
            PatchGenerator(base_width=12)


def test_generator_gradient_matches_finite_differences():
    # d(sum of fake pixels)/dz, checked on a random handful of latent coords
    g = make_generator(width=16, dtype=torch.float64)
    g.eval()
    z = sample_noise(1, seed=2, dtype=torch.float64).z.clone().requires_grad_(True)

    out = g(NoiseBatch(z=z)).fake_image.pixels.sum()
    out.backward()
    backprop = z.grad.clone()

    coords = torch.randperm(100, generator=torch.Generator().manual_seed(0))[:8]
    step = 1e-5
    with torch.no_grad():
        for i in coords:
            z_probe = z.detach().clone()
            z_probe[0, i] += step
            hi = float(g(NoiseBatch(z=z_probe)).fake_image.pixels.sum())
            z_probe[0, i] -= 2 * step
            lo = float(g(NoiseBatch(z=z_probe)).fake_image.pixels.sum())
            fd = (hi - lo) / (2 * step)
            rel = abs(fd - float(backprop[0, i])) / max(abs(fd), abs(float(backprop[0, i])), 1e-12)
            assert rel < 1e-5, f"coord {int(i)}: fd {fd} vs backprop {float(backprop[0, i])}"
