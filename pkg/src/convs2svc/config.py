"""Run configuration: INI text form, environment overrides, dataclass views."""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .model import MODES, ModelConfig
from .trainer import TrainConfig

ENV_PREFIX = "CONVS2SVC__"


@dataclass
class FeatureConfig:
    n_mcc: int = 28
    r: int = 3
    frame_period: float = 8.0


@dataclass
class PathConfig:
    manifest: str = ""
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


_MODEL_KEYS = ("mode", "n_speakers", "hidden", "key_dim", "embed_dim", "groups", "blocks", "kernel",
               "causal_kernel", "norm", "dropout", "dtype", "init_seed")


@dataclass
class ModelSection:
    mode: str = "pairwise"
    n_speakers: int = 2
    hidden: int = 0           # 0 selects the desk-scale width for the mode
    key_dim: int = 0
    embed_dim: int = 32
    groups: int = 3
    blocks: int = 4
    kernel: int = 5
    causal_kernel: int = 3
    norm: str = ""            # empty selects the mode default
    dropout: float = 0.1
    dtype: str = "float64"
    init_seed: int = 0


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    SECTIONS = ("model", "features", "loss", "train", "paths")

    def model_config(self) -> ModelConfig:
        kw = {k: getattr(self.model, k) for k in _MODEL_KEYS}
        return ModelConfig(n_mcc=self.features.n_mcc, r=self.features.r, **kw).resolved()

    def validate(self) -> "RunConfig":
        if self.model.mode not in MODES:
            raise ConfigError(f"unknown mode {self.model.mode!r}; choose from {', '.join(MODES)}")
        if self.features.r < 1 or self.features.frame_period <= 0:
            raise ConfigError("r must be >= 1 and the frame period positive")
        self.loss.validate()
        self.train.validate()
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        for name in self.SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str, env: dict | None = None) -> "RunConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        cfg = cls()
        for name in cp.sections():
            if name not in cls.SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            for key, raw in cp[name].items():
                cfg.set(name, key, raw)
        cfg.apply_env(os.environ if env is None else env)
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, env)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    def set(self, section: str, key: str, raw: str) -> None:
        if section not in self.SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        target = getattr(self, section)
        kinds = {f.name: type(getattr(target, f.name)) for f in fields(target)}
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        setattr(target, key, _parse(kinds[key], raw, f"{section}.{key}"))

    def apply_env(self, env) -> None:
        """Apply CONVS2SVC__SECTION__KEY=value overrides."""
        for name, value in sorted(env.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            parts = name[len(ENV_PREFIX):].lower().split("__")
            if len(parts) != 2:
                raise ConfigError(f"environment override {name} must look like {ENV_PREFIX}SECTION__KEY")
            self.set(parts[0], parts[1], value)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(kind, raw: str, where: str):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None
    return raw
