import math

import pytest
import torch

from leakseg.discriminator import (
    LeakConfig,
    SegLogits,
    UNetDiscriminator,
    class_probabilities,
    predict_mask,
    realness_score,
    renormalized_posterior,
)
from leakseg.errors import ConfigError
from leakseg.generator import PatchGenerator, sample_noise


def make_pair(disc_seed=1, gen_seed=0, leak=None, width=8, gen_width=16, channels=1):
    g = PatchGenerator(out_channels=channels, base_width=gen_width)
    g.init_weights(torch.Generator().manual_seed(gen_seed))
    d = UNetDiscriminator(
        in_channels=channels,
        base_width=width,
        leak=leak or LeakConfig.uniform(True, (1,)),
        gen_ladder_channels=g.ladder_channels,
    )
    d.init_weights(torch.Generator().manual_seed(disc_seed))
    return g, d


def logits_of(values) -> SegLogits:
    t = torch.tensor(values, dtype=torch.float64).reshape(1, -1, 1, 1)
    return SegLogits(logits=t)


class TestForwardShapes:
    def test_shape_contract(self):
        _, d = make_pair()
        d.set_leak_enabled(False)
        for batch in (1, 2, 3):
            s, feats = d(torch.randn(batch, 1, 64, 64))
            assert s.logits.shape == (batch, 2, 64, 64)
            assert feats.bottleneck.shape[0] == batch

    def test_default_width_bottleneck_is_4x4x512(self):
        d = UNetDiscriminator(in_channels=1, base_width=64)
        _, feats = d(torch.randn(1, 1, 64, 64))
        assert feats.bottleneck.shape == (1, 512, 4, 4)

    def test_non_patch_input_rejected(self):
        _, d = make_pair()
        d.set_leak_enabled(False)
        with pytest.raises(ValueError):
            d(torch.randn(1, 1, 96, 96))


class TestLeakSwitch:
    def test_disabled_matches_never_constructed(self):
        g, d_with = make_pair(disc_seed=3)
        d_with.set_leak_enabled(False)
        d_plain = UNetDiscriminator(in_channels=1, base_width=8)
        d_plain.init_weights(torch.Generator().manual_seed(3))
        x = torch.randn(2, 1, 64, 64)
        acts = g(sample_noise(2, seed=0))
        s_with, _ = d_with(x, leak=acts)
        s_plain, _ = d_plain(x)
        assert torch.equal(s_with.logits, s_plain.logits)

    def test_zero_scalings_equal_disabled(self):
        leak = LeakConfig(enabled=True, layers=(1,), alpha=(0.0,), beta=(0.0,))
        g, d = make_pair(disc_seed=2, leak=leak)
        x = torch.randn(2, 1, 64, 64)
        acts = g(sample_noise(2, seed=1))
        s_on, _ = d(x, leak=acts)
        s_off, _ = d(x, use_leak=False)
        assert torch.equal(s_on.logits, s_off.logits)

    def test_enabled_changes_output(self):
        g, d = make_pair(disc_seed=4)
        x = torch.randn(2, 1, 64, 64)
        acts = g(sample_noise(2, seed=2))
        s_on, _ = d(x, leak=acts)
        s_off, _ = d(x, use_leak=False)
        assert not torch.allclose(s_on.logits, s_off.logits)

    def test_injection_uses_only_selected_level(self):
        g, d = make_pair(disc_seed=5, leak=LeakConfig.uniform(True, (1,)))
        x = torch.randn(2, 1, 64, 64)
        acts = g(sample_noise(2, seed=3))
        s_ref, _ = d(x, leak=acts)
        # garbling unselected ladder levels must not change anything
        for level in (1, 2, 3):
            acts.intermediates[level] = torch.randn_like(acts.intermediates[level])
        s_same, _ = d(x, leak=acts)
        assert torch.equal(s_ref.logits, s_same.logits)
        acts.intermediates[0] = torch.randn_like(acts.intermediates[0])
        s_diff, _ = d(x, leak=acts)
        assert not torch.equal(s_ref.logits, s_diff.logits)

    def test_missing_leak_fatal(self):
        _, d = make_pair()
        with pytest.raises(ValueError):
            d(torch.randn(1, 1, 64, 64))

    def test_batch_mismatch_fatal(self):
        g, d = make_pair()
        acts = g(sample_noise(3, seed=0))
        with pytest.raises(ValueError):
            d(torch.randn(2, 1, 64, 64), leak=acts)

    def test_wrong_ladder_size_fatal(self):
        g, d = make_pair()
        acts = g(sample_noise(2, seed=0))
        acts.intermediates[0] = torch.randn(2, 16, 16, 16)
        with pytest.raises(ValueError):
            d(torch.randn(2, 1, 64, 64), leak=acts)

    def test_gradient_flows_into_leaked_activations(self):
        g, d = make_pair()
        x = torch.randn(2, 1, 64, 64)
        acts = g(sample_noise(2, seed=4))
        acts.intermediates[0].retain_grad()
        s, _ = d(x, leak=acts)
        s.logits.sum().backward()
        grad = acts.intermediates[0].grad
        assert grad is not None and float(grad.abs().max()) > 0

    def test_enable_without_convs_rejected(self):
        d = UNetDiscriminator(in_channels=1, base_width=8)
        with pytest.raises(ConfigError):
            d.set_leak_enabled(True)

    def test_leak_config_validation(self):
        with pytest.raises(ConfigError):
            LeakConfig(layers=(5,), alpha=(1.0,), beta=(1.0,))
        with pytest.raises(ConfigError):
            LeakConfig(layers=(1, 2), alpha=(1.0,), beta=(1.0, 1.0))
        with pytest.raises(ConfigError):
            LeakConfig(layers=(1,), alpha=(-1.0,), beta=(1.0,))


class TestProbabilities:
    def test_equal_logits_give_uniform_three_way(self):
        probs = class_probabilities(logits_of([0.0, 0.0]))
        assert torch.allclose(probs, torch.full_like(probs, 1.0 / 3.0))

    def test_hand_softmax_with_clamped_zero(self):
        # softmax over (ln2, ln2, 0) = (0.4, 0.4, 0.2)
        probs = class_probabilities(logits_of([math.log(2.0), math.log(2.0)]))
        expected = torch.tensor([0.4, 0.4, 0.2], dtype=torch.float64).reshape(1, 3, 1, 1)
        assert torch.allclose(probs, expected, atol=1e-12)

    def test_dominant_logit_limit(self):
        probs = class_probabilities(logits_of([60.0, 0.0]))
        assert float(probs[0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_rows_sum_to_one(self, rng):
        logits = SegLogits(logits=torch.tensor(rng.normal(size=(3, 2, 5, 5))))
        total = class_probabilities(logits).sum(dim=1)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-6)


class TestRealness:
    def test_direct_substitution(self):
        # l = (0, 0): Z = 2, D = 2/3
        score = realness_score(logits_of([0.0, 0.0]))
        assert float(score) == pytest.approx(2.0 / 3.0, abs=1e-12)

    def test_certain_fake_limit(self):
        score = realness_score(logits_of([-80.0, -80.0]))
        assert float(score) == pytest.approx(0.0, abs=1e-12)

    def test_identity_with_fake_probability(self, rng):
        logits = SegLogits(logits=torch.tensor(rng.normal(size=(4, 2, 8, 8), scale=3)))
        d = realness_score(logits)
        p_fake = class_probabilities(logits)[:, -1]
        assert float((d + p_fake - 1.0).abs().max()) < 1e-6


class TestPredictMask:
    def test_above_threshold_is_vessel(self):
        s = logits_of([0.0, 2.2])  # p_vessel = sigmoid(2.2) = 0.90
        assert bool(predict_mask(s, 0.5)[0, 0, 0])

    def test_exact_threshold_is_background(self):
        s = logits_of([0.0, 0.0])  # renormalized posterior exactly 0.5
        assert float(renormalized_posterior(s)[0, 1]) == pytest.approx(0.5, abs=1e-15)
        assert not bool(predict_mask(s, 0.5)[0, 0, 0])

    def test_threshold_range(self):
        s = logits_of([0.0, 0.0])
        for bad in (0.0, 1.0, -1.0):
            with pytest.raises(ConfigError):
                predict_mask(s, bad)
