"""Flat-key configuration: `key = value` lines, `#` comments, typed by the
default value of each known key. Unknown keys fail loudly with the key name.
"""

from __future__ import annotations

from .core import config_hash as _hash
from .errors import ConfigError

DEFAULTS: dict[str, object] = {
    "seed": 0,
    # phantom cohort generation
    "synth.n_subjects": 40,
    "synth.converter_fraction": 0.3,
    "synth.intervals": "6,12,24",
    "synth.grid": 32,
    "synth.noise_sigma": 0.02,
    "synth.baseline_matched": True,
    "synth.expansion_rate": 0.015,
    "synth.shrink_rate": 0.008,
    "synth.geometry_jitter": 0.05,
    "synth.pretrain_n": 80,
    "synth.pretrain_ad_scale": 1.6,
    # deterministic preprocessing
    "preprocess.target_grid": 32,
    "preprocess.sigma": 0.5,
    "preprocess.tau": 0.5,
    "preprocess.min_nonzero": 0,  # 0 = scale the 128^3 reference threshold
    # encoder architecture
    "encoder.channels": "16,32,64,128,128",
    "encoder.input_grid": 32,
    "encoder.dcca_enabled": True,
    "encoder.leaky_slope": 0.01,
    # fusion/head architecture
    "fusion.heads": 4,
    "fusion.d_model": 128,
    "head.hidden": 64,
    "head.dropout": 0.3,
    "baselines.lstm_hidden": 64,
    # phase 1
    "pretrain.lr": 1e-3,
    "pretrain.epochs": 3,
    "pretrain.batch_size": 8,
    "pretrain.weight_decay": 1e-2,
    "pretrain.val_fraction": 0.2,
    "pretrain.augment": False,
    "pretrain.class_weighting": True,
    # phase 2
    "train.model": "tafnet",
    "train.lr": 1e-3,
    "train.epochs": 30,
    "train.batch_size": 8,
    "train.weight_decay": 1e-2,
    "train.class_weighting": True,
    "train.augment": False,
    # evaluation protocol
    "eval.folds": 5,
    "eval.models": "tafnet,siamese_sub,cnn_lstm,initial_only",
    "eval.threshold": 0.5,
    "eval.learning_curve": True,
    "eval.fractions": "0.2,0.6,1.0",
    # interpretability
    "interpret.max_pairs": 10,
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"key '{key}' expects a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError as e:
            raise ConfigError(f"key '{key}' expects an int, got {raw!r}") from e
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError as e:
            raise ConfigError(f"key '{key}' expects a float, got {raw!r}") from e
    return raw


def _assign(cfg: dict, key: str, raw: str, origin: str):
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key '{key}' ({origin})")
    cfg[key] = _coerce(key, raw)


def load_config(path=None, overrides=(), seed: int | None = None) -> dict:
    """Resolve defaults -> config file -> --set overrides -> --seed flag."""
    cfg = dict(DEFAULTS)
    if path is not None:
        try:
            with open(path) as f:
                lines = f.readlines()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        for lineno, line in enumerate(lines, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = stripped.split("=", 1)
            _assign(cfg, key, raw, f"{path}:{lineno}")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _assign(cfg, key, raw, "--set")
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def config_hash(cfg: dict) -> str:
    return _hash(cfg)


def int_list(cfg: dict, key: str) -> list[int]:
    try:
        return [int(x) for x in str(cfg[key]).split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"key '{key}' expects comma-separated ints") from e


def float_list(cfg: dict, key: str) -> list[float]:
    try:
        return [float(x) for x in str(cfg[key]).split(",") if x.strip()]
    except ValueError as e:
        raise ConfigError(f"key '{key}' expects comma-separated floats") from e


def str_list(cfg: dict, key: str) -> list[str]:
    return [x.strip() for x in str(cfg[key]).split(",") if x.strip()]


def write_echo(cfg: dict, path) -> None:
    with open(path, "w") as f:
        for key in sorted(cfg):
            f.write(f"{key} = {cfg[key]}\n")
