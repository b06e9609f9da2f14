"""Run configuration files.

An INI file with a fixed key set. Every key is optional (defaults below),
but unknown sections or keys are rejected so typos never pass silently::

    [data]
    manifest = pairs.txt          ; relative to the config file
    convention = rectified        ; rectified | erroneous
    swap = false
    split_seed = 0
    split_ratios = 0.8, 0.1, 0.1

    [extractor]
    channels = 64
    layers = 4
    heads = 4
    widths = 16, 32, 64
    in_channels = 1

    [regressor]
    block_channels = 0            ; 0 keeps the input width
    hidden = 1024
    pooling = avg                 ; avg | max

    [optim]
    epochs = 80
    lr = 0.001
    batch_size = 8
    step_size = 6
    gamma = 0.9
    seed = 0

    [run]
    variant = full                ; full | no_warp | cnn_only | self_attn_only
    output_dir = runs/default
    temperature = 1.0
    model_seed = 0
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from relpose.data import CONVENTIONS
from relpose.errors import BadChannelCount, ConfigError
from relpose.features import ExtractorConfig
from relpose.regressor import VARIANTS, ModelConfig, RegressorConfig
from relpose.training import TrainConfig

_DEFAULTS: dict[str, dict[str, str]] = {
    "data": {"manifest": "pairs.txt", "convention": "rectified", "swap": "false",
             "split_seed": "0", "split_ratios": "0.8, 0.1, 0.1"},
    "extractor": {"channels": "64", "layers": "4", "heads": "4", "widths": "16, 32, 64", "in_channels": "1"},
    "regressor": {"block_channels": "0", "hidden": "1024", "pooling": "avg"},
    "optim": {"epochs": "80", "lr": "0.001", "batch_size": "8", "step_size": "6", "gamma": "0.9", "seed": "0"},
    "run": {"variant": "full", "output_dir": "runs/default", "temperature": "1.0", "model_seed": "0"},
}


@dataclass(frozen=True)
class RunConfig:
    manifest: Path
    convention: str = "rectified"
    swap: bool = False
    split_seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("runs/default")
    model_seed: int = 0
    source: Path | None = None


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str, base_dir=".", check_paths: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    values = {s: dict(keys) for s, keys in _DEFAULTS.items()}
    for section in parser.sections():
        if section not in _DEFAULTS:
            raise ConfigError(f"unknown section [{section}]", key=section)
        for key, value in parser.items(section):
            if key not in _DEFAULTS[section]:
                raise ConfigError(f"unknown key {section}.{key}", key=f"{section}.{key}")
            values[section][key] = value

    def get(section, key, conv):
        try:
            return conv(values[section][key])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}.{key}: {exc}", key=f"{section}.{key}") from None

    base = Path(base_dir)
    d, e, r, o, run = (values[s] for s in ("data", "extractor", "regressor", "optim", "run"))
    if d["convention"] not in CONVENTIONS:
        raise ConfigError(f"data.convention must be one of {CONVENTIONS}", key="data.convention")
    if run["variant"] not in VARIANTS:
        raise ConfigError(f"run.variant must be one of {VARIANTS}, got {run['variant']!r}", key="run.variant")
    ratios = get("data", "split_ratios", _floats)
    if len(ratios) != 3:
        raise ConfigError("data.split_ratios needs three numbers", key="data.split_ratios")
    try:
        extractor = ExtractorConfig(channels=get("extractor", "channels", int), layers=get("extractor", "layers", int),
                                    heads=get("extractor", "heads", int), widths=get("extractor", "widths", _ints),
                                    in_channels=get("extractor", "in_channels", int))
    except (BadChannelCount, ValueError) as exc:
        raise ConfigError(f"extractor: {exc}", key="extractor") from None
    block = get("regressor", "block_channels", int)
    try:
        regressor = RegressorConfig(block_channels=block or None, hidden=get("regressor", "hidden", int),
                                    pooling=r["pooling"])
    except ValueError as exc:
        raise ConfigError(f"regressor: {exc}", key="regressor") from None
    train = TrainConfig(epochs=get("optim", "epochs", int), lr=get("optim", "lr", float),
                        batch_size=get("optim", "batch_size", int), step_size=get("optim", "step_size", int),
                        gamma=get("optim", "gamma", float), seed=get("optim", "seed", int))
    if train.epochs < 1 or train.batch_size < 1 or train.step_size < 1 or not train.lr > 0:
        raise ConfigError("optim: epochs, batch_size, step_size and lr must be positive", key="optim")
    temperature = get("run", "temperature", float)
    if not temperature > 0:
        raise ConfigError("run.temperature must be positive", key="run.temperature")
    manifest = base / d["manifest"]
    if check_paths and not manifest.is_file():
        raise ConfigError(f"data.manifest does not exist: {manifest}", key="data.manifest")
    return RunConfig(
        manifest=manifest,
        convention=d["convention"],
        swap=get("data", "swap", _bool),
        split_seed=get("data", "split_seed", int),
        split_ratios=ratios,
        model=ModelConfig(extractor, regressor, variant=run["variant"], temperature=temperature),
        train=train,
        output_dir=base / run["output_dir"],
        model_seed=get("run", "model_seed", int),
    )


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config(text, base_dir=path.parent, check_paths=check_paths)
    return RunConfig(**{**cfg.__dict__, "source": path})


def render_config(values: dict[str, dict[str, object]]) -> str:
    """INI text for a nested ``{section: {key: value}}`` mapping (for tests,
    ``synth`` and examples). Sequences are comma-joined."""
    lines = []
    for section, keys in values.items():
        lines.append(f"[{section}]")
        for k, v in keys.items():
            if isinstance(v, (tuple, list)):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
