import json

import pytest

from leakseg.config import config_from_dict, load_config_file, parse_config
from leakseg.errors import ConfigError


def minimal(**extra):
    data = {"data": {"root": "/data/x", "layout": "synthetic"}}
    data.update(extra)
    return data


class TestDefaults:
    def test_minimal_config_fills_defaults(self):
        cfg = config_from_dict(minimal())
        assert cfg.loss.lambda1 == 1.0 and cfg.loss.lambda3 == 0.1
        assert cfg.loss.focal_alpha_t == 2.0 and cfg.loss.focal_rho == 0.25
        assert cfg.ema.alpha == 0.99
        assert cfg.optim.lr == 2e-4
        assert cfg.model.gen_base_width == 512 and cfg.model.disc_base_width == 64
        assert cfg.evaluation.stride == 32 and cfg.evaluation.threshold == 0.5
        assert cfg.channels() == 1  # synthetic default
        assert cfg.leak_enabled()  # full mode default

    def test_echo_round_trips(self):
        cfg = config_from_dict(minimal())
        echoed = config_from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert echoed == cfg

    def test_ablation_derives_components(self):
        for mode, gan, teacher, leak in [
            ("unet_only", False, False, False),
            ("unet_gan", True, False, False),
            ("unet_gan_mt", True, True, False),
            ("full", True, True, True),
        ]:
            cfg = config_from_dict(minimal(ablation={"mode": mode}))
            assert cfg.uses_gan() == gan
            assert cfg.uses_teacher() == teacher
            assert cfg.leak_enabled() == leak


class TestValidation:
    def test_ema_alpha_out_of_range_names_constraint(self):
        with pytest.raises(ConfigError, match=r"ema.alpha.*0\.9"):
            config_from_dict(minimal(ema={"alpha": 0.5}))

    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="typo_key"):
            config_from_dict(minimal(typo_key=1))
        with pytest.raises(ConfigError, match="warmup"):
            config_from_dict(minimal(optim={"warmup": 10}))

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="optim.lr"):
            config_from_dict(minimal(optim={"lr": "fast"}))
        with pytest.raises(ConfigError, match="seed"):
            config_from_dict(minimal(seed=1.5))

    def test_z_len_override_rejected(self):
        with pytest.raises(ConfigError, match="z_len"):
            config_from_dict(minimal(model={"z_len": 128}))

    def test_noise_lambda_range(self):
        with pytest.raises(ConfigError, match="noise_lambda"):
            config_from_dict(minimal(ema={"noise_lambda": 1.5}))

    def test_leak_arity_mismatch(self):
        with pytest.raises(ConfigError, match="alpha"):
            config_from_dict(
                minimal(ablation={"mode": "full", "leak": {"layers": [1, 2], "alpha": [1.0]}})
            )

    def test_leak_enabled_outside_full_rejected(self):
        with pytest.raises(ConfigError, match="full"):
            config_from_dict(
                minimal(ablation={"mode": "unet_gan", "leak": {"enabled": True}})
            )

    def test_leak_needs_matching_unsup_batches(self):
        with pytest.raises(ConfigError, match="batch_unlabelled"):
            config_from_dict(minimal(optim={"batch_unlabelled": 8, "batch_fake": 4}))

    def test_missing_root(self):
        with pytest.raises(ConfigError, match="data.root"):
            config_from_dict({})

    def test_cross_domain_ratio_range(self):
        with pytest.raises(ConfigError, match="mix_ratio"):
            config_from_dict(minimal(cross_domain={"root": "/t", "mix_ratio": 1.5}))


class TestFiles:
    def test_json_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text('{"seed": 1, "seed": 2, "data": {"root": "/x"}}')
        with pytest.raises(ConfigError, match="duplicate"):
            load_config_file(path)

    def test_yaml_duplicate_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("seed: 1\nseed: 2\ndata:\n  root: /x\n")
        with pytest.raises(ConfigError, match="duplicate"):
            load_config_file(path)

    def test_yaml_round_trip(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(
            "data:\n  root: /data/x\n  layout: synthetic\noptim:\n  lr: 0.001\nseed: 3\n"
        )
        cfg = parse_config(path)
        assert cfg.optim.lr == 0.001 and cfg.seed == 3

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "none.yaml")

    def test_overrides_win_over_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"data": {"root": "/x", "layout": "synthetic"}, "seed": 1}))
        cfg = parse_config(path, {"seed": 9, "optim.lr": 5e-4})
        assert cfg.seed == 9 and cfg.optim.lr == 5e-4
