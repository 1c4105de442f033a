"""Experiment configuration: flat YAML files, validation, bundled presets."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, fields
from importlib import resources

import yaml

from .errors import ConfigError

RULES = ("fedavg", "comed", "sign", "foolsgold")
ATTACKS = ("none", "trojan", "distributed_trojan", "label_flip_boosted", "negate_loss")
PARTITIONS = ("iid", "label_skew")
MODELS = ("mlp", "cnn")
PATTERNS = ("plus", "square", "custom")


@dataclass
class ExperimentConfig:
    """One federated run. Field names double as the config-file keys."""

    # federation
    rounds: int = 10
    num_agents: int = 10
    corrupt_frac: float = 0.0
    poison_frac: float = 0.5
    sample_frac: float = 1.0
    local_epochs: int = 2
    batch_size: int = 256
    local_lr: float = 0.1
    # server
    server_lr: float = None  # default 1.0, or 1e-3 when rule == "sign"
    theta: int = 4
    clip_norm: float = 0.0
    noise_sigma: float = 0.0
    rule: str = "fedavg"
    rlr_enabled: bool = False
    rlr_activation_round: int = 1
    rlr_activation_acc: float = None
    # attack
    attack: str = "none"
    boost_factor: float = 1.0
    trojan_pattern: str = "plus"
    trojan_pixels: str = ""  # "row,col,intensity; row,col,intensity; ..." for custom
    base_class: int = 5
    target_class: int = 7
    # data
    train_images: str = ""
    train_labels: str = ""
    val_images: str = ""
    val_labels: str = ""
    partition: str = "iid"
    labels_per_agent: int = 2
    # model / run
    model: str = "mlp"
    seed: int = 0
    attribution: bool = False
    attribution_top_k: int = 100

    def sampled_per_round(self):
        return int(math.ceil(self.sample_frac * self.num_agents))

    def resolved_server_lr(self):
        if self.server_lr is not None:
            return float(self.server_lr)
        return 1e-3 if self.rule == "sign" else 1.0


_INT_FIELDS = {"rounds", "num_agents", "local_epochs", "batch_size", "theta",
               "rlr_activation_round", "base_class", "target_class",
               "labels_per_agent", "seed", "attribution_top_k"}
_FLOAT_FIELDS = {"corrupt_frac", "poison_frac", "sample_frac", "local_lr", "server_lr",
                 "clip_norm", "noise_sigma", "rlr_activation_acc", "boost_factor"}
_BOOL_FIELDS = {"rlr_enabled", "attribution"}


def _coerce(name, value):
    if name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config field {name!r} must be an integer, got {value!r}")
        return value
    if name in _FLOAT_FIELDS:
        if value is None and name in ("server_lr", "rlr_activation_acc"):
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config field {name!r} must be a number, got {value!r}")
        return float(value)
    if name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"config field {name!r} must be true/false, got {value!r}")
        return value
    if not isinstance(value, str):
        raise ConfigError(f"config field {name!r} must be a string, got {value!r}")
    return value


def config_from_mapping(raw: dict) -> ExperimentConfig:
    known = {f.name for f in fields(ExperimentConfig)}
    out = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config field {key!r}")
        out[key] = _coerce(key, value)
    cfg = ExperimentConfig(**out)
    validate_config(cfg, check_files=False)
    return cfg


def load_config(path) -> ExperimentConfig:
    """Parse a flat-mapping YAML config file."""
    try:
        with open(path, "r") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    if raw is None:
        raw = {}
    if not isinstance(raw, dict) or any(isinstance(v, (dict, list)) for v in raw.values()):
        raise ConfigError(f"config file {path} must be a flat key: value mapping")
    return config_from_mapping(raw)


def parse_pixel_list(text):
    """'r,c,v; r,c,v; ...' -> ((r, c, v), ...)."""
    pixels = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = [p.strip() for p in chunk.split(",")]
        if len(parts) != 3:
            raise ConfigError(f"trojan_pixels entry {chunk!r} is not 'row,col,intensity'")
        try:
            pixels.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            raise ConfigError(f"trojan_pixels entry {chunk!r} has non-numeric values")
    if not pixels:
        raise ConfigError("trojan_pixels must list at least one pixel")
    return tuple(pixels)


def validate_config(cfg: ExperimentConfig, check_files=True):
    """Semantic validation; raises ConfigError naming the offending field."""
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(cfg.rounds >= 1, f"rounds must be >= 1, got {cfg.rounds}")
    need(cfg.num_agents >= 1, f"num_agents must be >= 1, got {cfg.num_agents}")
    need(0.0 <= cfg.corrupt_frac < 1.0, f"corrupt_frac must be in [0, 1), got {cfg.corrupt_frac}")
    need(0.0 <= cfg.poison_frac <= 1.0, f"poison_frac must be in [0, 1], got {cfg.poison_frac}")
    need(0.0 < cfg.sample_frac <= 1.0, f"sample_frac must be in (0, 1], got {cfg.sample_frac}")
    need(cfg.local_epochs >= 1, f"local_epochs must be >= 1, got {cfg.local_epochs}")
    need(cfg.batch_size >= 1, f"batch_size must be >= 1, got {cfg.batch_size}")
    need(cfg.local_lr > 0, f"local_lr must be > 0, got {cfg.local_lr}")
    need(cfg.server_lr is None or cfg.server_lr > 0,
         f"server_lr must be > 0, got {cfg.server_lr}")
    need(cfg.theta >= 1, f"theta must be >= 1, got {cfg.theta}")
    need(cfg.clip_norm >= 0, f"clip_norm must be >= 0, got {cfg.clip_norm}")
    need(cfg.noise_sigma >= 0, f"noise_sigma must be >= 0, got {cfg.noise_sigma}")
    need(cfg.rule in RULES, f"rule must be one of {RULES}, got {cfg.rule!r}")
    need(cfg.attack in ATTACKS, f"attack must be one of {ATTACKS}, got {cfg.attack!r}")
    need(cfg.partition in PARTITIONS, f"partition must be one of {PARTITIONS}, got {cfg.partition!r}")
    need(cfg.model in MODELS, f"model must be one of {MODELS}, got {cfg.model!r}")
    need(cfg.trojan_pattern in PATTERNS,
         f"trojan_pattern must be one of {PATTERNS}, got {cfg.trojan_pattern!r}")
    need(cfg.base_class != cfg.target_class,
         f"base_class and target_class must differ, both are {cfg.base_class}")
    need(cfg.base_class >= 0 and cfg.target_class >= 0, "class ids must be >= 0")
    need(cfg.labels_per_agent >= 1, f"labels_per_agent must be >= 1, got {cfg.labels_per_agent}")
    need(cfg.boost_factor > 0, f"boost_factor must be > 0, got {cfg.boost_factor}")
    need(cfg.attribution_top_k >= 1,
         f"attribution_top_k must be >= 1, got {cfg.attribution_top_k}")
    need(cfg.rlr_activation_round >= 1,
         f"rlr_activation_round must be >= 1, got {cfg.rlr_activation_round}")
    if cfg.rlr_activation_acc is not None:
        need(0.0 < cfg.rlr_activation_acc <= 1.0,
             f"rlr_activation_acc must be in (0, 1], got {cfg.rlr_activation_acc}")
        need(cfg.rlr_activation_round == 1,
             "rlr_activation_round and rlr_activation_acc are mutually exclusive")
    if cfg.noise_sigma > 0:
        need(cfg.clip_norm > 0, "noise_sigma > 0 requires clip_norm > 0")
    if cfg.rlr_enabled:
        need(cfg.rule != "foolsgold", "rlr_enabled cannot wrap rule 'foolsgold'")
        need(cfg.theta <= cfg.sampled_per_round(),
             f"theta={cfg.theta} exceeds the {cfg.sampled_per_round()} agents sampled per round")
    if cfg.attack == "negate_loss":
        need(cfg.clip_norm > 0, "attack 'negate_loss' requires clip_norm > 0 to bound ascent")
    if cfg.trojan_pattern == "custom":
        parse_pixel_list(cfg.trojan_pixels)
    if check_files:
        for name in ("train_images", "train_labels", "val_images", "val_labels"):
            path = getattr(cfg, name)
            need(bool(path), f"config field {name!r} is required")
            need(os.path.exists(path), f"{name} file does not exist: {path}")


# ---------------------------------------------------------------------------
# presets


def preset_names():
    root = resources.files("fedsim").joinpath("presets")
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name):
    p = resources.files("fedsim").joinpath("presets", f"{name}.yaml")
    if not p.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return p


def load_preset(name) -> ExperimentConfig:
    with resources.as_file(preset_path(name)) as real:
        return load_config(str(real))


def preset_description(name):
    text = preset_path(name).read_text()
    for line in text.splitlines():
        if line.startswith("#"):
            return line.lstrip("# ").strip()
    return ""
