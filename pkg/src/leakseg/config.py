"""Declarative experiment configuration: dataclasses, strict parsing,
constraint validation and round-trippable echo.

Config files are JSON or YAML mappings mirroring :class:`ExperimentConfig`.
Unknown keys, duplicate keys, type mismatches and constraint violations are
all rejected with the offending key named.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .errors import ConfigError
from .generator import Z_LENGTH
from .teacher import ALPHA_RANGE

ABLATION_MODES = ("unet_only", "unet_gan", "unet_gan_mt", "full")
CONSISTENCY_KINDS = ("focal", "mse")
GEN_LOSS_KINDS = ("adv", "feature-matching")
PRECISIONS = ("float32", "float64")


@dataclass
class DataConfig:
    root: str = ""
    layout: str = "generic"
    n_labelled: int = 2
    channels: Optional[int] = None  # default: 1 for synthetic, 3 otherwise
    patches_per_epoch: int = 2048
    eval_root: Optional[str] = None  # defaults to root


@dataclass
class LeakSettings:
    enabled: Optional[bool] = None  # derived from the ablation mode if unset
    layers: tuple[int, ...] = (1,)
    alpha: tuple[float, ...] = (1.0,)
    beta: tuple[float, ...] = (1.0,)


@dataclass
class AblationConfig:
    mode: str = "full"
    leak: LeakSettings = field(default_factory=LeakSettings)


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.1
    focal_alpha_t: float = 2.0
    focal_rho: float = 0.25
    supervised_focal: bool = True
    consistency: str = "focal"
    gen_loss: str = "adv"
    cons_ramp_fraction: float = 0.1


@dataclass
class OptimConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    iterations: int = 2000
    batch_labelled: int = 16
    batch_unlabelled: int = 16
    batch_fake: int = 16
    d_steps: int = 1
    g_steps: int = 1
    checkpoint_every: Optional[int] = None  # default: once per patch epoch


@dataclass
class EmaConfig:
    alpha: float = 0.99
    noise_lambda: float = 0.1


@dataclass
class ModelConfig:
    gen_base_width: int = 512
    disc_base_width: int = 64
    z_len: int = Z_LENGTH


@dataclass
class EvalConfig:
    stride: int = 32
    threshold: float = 0.5
    fov: str = "auto"  # auto | on | off
    eval_net: str = "student"  # student | teacher


@dataclass
class CrossDomainConfig:
    root: str = ""
    layout: str = "generic"
    eval_root: Optional[str] = None
    mix_ratio: float = 0.5


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    ema: EmaConfig = field(default_factory=EmaConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    cross_domain: Optional[CrossDomainConfig] = None
    seed: int = 0
    precision: str = "float32"
    torch_threads: Optional[int] = None
    out_dir: str = "runs/run"

    # -- derived helpers -------------------------------------------------
    def channels(self) -> int:
        if self.data.channels is not None:
            return self.data.channels
        return 1 if self.data.layout == "synthetic" else 3

    def leak_enabled(self) -> bool:
        if self.ablation.leak.enabled is not None:
            return self.ablation.leak.enabled
        return self.ablation.mode == "full"

    def uses_gan(self) -> bool:
        return self.ablation.mode != "unet_only"

    def uses_teacher(self) -> bool:
        return self.ablation.mode in ("unet_gan_mt", "full")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Enforce every cross-field constraint; returns the config unchanged."""
    _check(cfg.data.root != "", "data.root is required")
    _check(cfg.data.n_labelled >= 1, f"data.n_labelled must be >= 1, got {cfg.data.n_labelled}")
    _check(cfg.data.patches_per_epoch >= 1, "data.patches_per_epoch must be >= 1")
    _check(
        ALPHA_RANGE[0] <= cfg.ema.alpha <= ALPHA_RANGE[1],
        f"ema.alpha must lie in [{ALPHA_RANGE[0]}, {ALPHA_RANGE[1]}], got {cfg.ema.alpha}",
    )
    _check(
        0.0 < cfg.ema.noise_lambda < 1.0,
        f"ema.noise_lambda must lie in (0, 1), got {cfg.ema.noise_lambda}",
    )
    _check(
        cfg.ablation.mode in ABLATION_MODES,
        f"ablation.mode must be one of {ABLATION_MODES}, got '{cfg.ablation.mode}'",
    )
    _check(
        cfg.loss.consistency in CONSISTENCY_KINDS,
        f"loss.consistency must be one of {CONSISTENCY_KINDS}, got '{cfg.loss.consistency}'",
    )
    _check(
        cfg.loss.gen_loss in GEN_LOSS_KINDS,
        f"loss.gen_loss must be one of {GEN_LOSS_KINDS}, got '{cfg.loss.gen_loss}'",
    )
    for name in ("lambda1", "lambda2", "lambda3", "focal_rho"):
        _check(getattr(cfg.loss, name) >= 0, f"loss.{name} must be nonnegative")
    _check(cfg.loss.focal_alpha_t > 0, "loss.focal_alpha_t must be positive")
    _check(0.0 <= cfg.loss.cons_ramp_fraction <= 1.0, "loss.cons_ramp_fraction must lie in [0, 1]")
    _check(
        cfg.model.z_len == Z_LENGTH,
        f"model.z_len is fixed at {Z_LENGTH}; override to {cfg.model.z_len} rejected",
    )
    _check(cfg.model.gen_base_width >= 8, "model.gen_base_width must be >= 8")
    _check(cfg.model.disc_base_width >= 8, "model.disc_base_width must be >= 8")
    _check(cfg.optim.lr > 0, "optim.lr must be positive")
    _check(cfg.optim.iterations >= 0, "optim.iterations must be >= 0")
    _check(cfg.optim.batch_labelled >= 1, "optim.batch_labelled must be >= 1 (supervised term needs data)")
    _check(cfg.optim.batch_unlabelled >= 1, "optim.batch_unlabelled must be >= 1")
    _check(cfg.optim.batch_fake >= 1, "optim.batch_fake must be >= 1")
    _check(cfg.optim.d_steps >= 1, "optim.d_steps must be >= 1")
    _check(cfg.optim.g_steps >= 0, "optim.g_steps must be >= 0")
    _check(cfg.precision in PRECISIONS, f"precision must be one of {PRECISIONS}")
    _check(1 <= cfg.evaluation.stride <= 64, "evaluation.stride must lie in [1, 64]")
    _check(0.0 < cfg.evaluation.threshold < 1.0, "evaluation.threshold must lie in (0, 1)")
    _check(cfg.evaluation.fov in ("auto", "on", "off"), "evaluation.fov must be auto, on or off")
    _check(
        cfg.evaluation.eval_net in ("student", "teacher"),
        "evaluation.eval_net must be student or teacher",
    )
    leak = cfg.ablation.leak
    _check(
        len(leak.alpha) == len(leak.layers) and len(leak.beta) == len(leak.layers),
        "ablation.leak alpha/beta need one entry per selected layer",
    )
    _check(all(l in (1, 2, 3, 4) for l in leak.layers), "ablation.leak.layers must be within {1,2,3,4}")
    if leak.enabled and cfg.ablation.mode != "full":
        raise ConfigError(
            f"ablation.leak.enabled=true requires ablation.mode='full', got '{cfg.ablation.mode}'"
        )
    if cfg.leak_enabled():
        _check(
            cfg.optim.batch_unlabelled == cfg.optim.batch_fake,
            "leaking requires optim.batch_unlabelled == optim.batch_fake "
            "(generator activations are shared across the unsupervised forwards)",
        )
    if cfg.cross_domain is not None:
        _check(cfg.cross_domain.root != "", "cross_domain.root is required when cross_domain is set")
        _check(
            0.0 <= cfg.cross_domain.mix_ratio <= 1.0,
            f"cross_domain.mix_ratio must lie in [0, 1], got {cfg.cross_domain.mix_ratio}",
        )
    _check(cfg.torch_threads is None or cfg.torch_threads >= 1, "torch_threads must be >= 1")
    return cfg


# ---------------------------------------------------------------------------
# dict -> dataclass construction with strict key/type checking


def _coerce(value: Any, target, path: str) -> Any:
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported value {value!r}")


def _build_dataclass(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{path}: unknown key '{sorted(unknown)[0]}'")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        sub_path = f"{path}.{name}" if path else name
        kwargs[name] = _build_value(f.type, value, sub_path)
    return cls(**kwargs)


_SUB_CONFIGS = (
    DataConfig,
    AblationConfig,
    LeakSettings,
    LossConfig,
    OptimConfig,
    EmaConfig,
    ModelConfig,
    EvalConfig,
    CrossDomainConfig,
)


def _build_value(type_str, value: Any, path: str):
    # field types arrive as strings because of `from __future__ import annotations`
    t = type_str if isinstance(type_str, str) else getattr(type_str, "__name__", str(type_str))
    if value is None:
        if "Optional" in t:
            return None
        raise ConfigError(f"{path}: null is not allowed")
    for cls in _SUB_CONFIGS:
        if cls.__name__ in t:
            return _build_dataclass(cls, value, path)
    if t.startswith("tuple[int"):
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, int) for v in value
        ):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return tuple(value)
    if t.startswith("tuple[float"):
        if not isinstance(value, (list, tuple)) or any(
            isinstance(v, bool) or not isinstance(v, (int, float)) for v in value
        ):
            raise ConfigError(f"{path}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if "bool" in t:
        return _coerce(value, bool, path)
    if "float" in t:
        return _coerce(value, float, path)
    if "int" in t:
        return _coerce(value, int, path)
    if "str" in t:
        return _coerce(value, str, path)
    raise ConfigError(f"{path}: cannot parse value for type {t}")


def config_from_dict(data: dict) -> ExperimentConfig:
    return validate(_build_dataclass(ExperimentConfig, data, ""))


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise ConfigError(f"duplicate config key '{key}'")
        out[key] = value
    return out


class _StrictYamlLoader(yaml.SafeLoader):
    pass


def _yaml_mapping(loader, node):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node)
        if key in mapping:
            raise ConfigError(f"duplicate config key '{key}'")
        mapping[key] = loader.construct_object(value_node)
    return mapping


_StrictYamlLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _yaml_mapping
)


def load_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file does not exist: {path}")
    text = path.read_text()
    if path.suffix.lower() in (".yaml", ".yml"):
        data = yaml.load(text, Loader=_StrictYamlLoader)
    else:
        data = json.loads(text, object_pairs_hook=_reject_duplicates)
    if not isinstance(data, dict):
        raise ConfigError(f"config file must contain a mapping: {path}")
    return data


def parse_config(path: Optional[str | Path] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Build a validated config from an optional file plus nested overrides.

    ``overrides`` uses dotted keys ("optim.lr") produced by the CLI flags;
    they replace file values before validation, so the echoed config always
    reflects the flags.
    """
    data = load_config_file(path) if path is not None else {}
    for dotted, value in (overrides or {}).items():
        parts = dotted.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override '{dotted}': '{p}' is not a mapping")
        node[parts[-1]] = value
    return config_from_dict(data)
