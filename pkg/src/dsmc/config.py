"""Run configuration: ``key = value`` lines grouped in [model], [train] and
[data] sections.  Unknown keys are rejected; parse -> serialize -> parse is
a fixpoint."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields

from .model import ABLATIONS, ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    iterations: int = 1000
    patch: int = 64
    seed: int = 0
    primal_weight: float = 1.0
    dual_weight: float = 0.1
    perceptual_weight: float = 0.1
    charbonnier_eps: float = 1e-3
    primal_terms: tuple = ("cb", "perc")
    dual_terms: tuple = ("cb", "perc")
    ablations: tuple = ()
    augment: bool = True
    log_every: int = 10
    checkpoint_every: int = 100
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        self.primal_terms = tuple(self.primal_terms)
        self.dual_terms = tuple(self.dual_terms)
        self.ablations = tuple(self.ablations)
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ConfigError(f"unknown ablation flags {bad}; expected a subset of {ABLATIONS}")
        if self.batch < 1 or self.iterations < 0 or self.patch < 2:
            raise ConfigError("batch >= 1, iterations >= 0 and patch >= 2 are required")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    @classmethod
    def desk(cls, **overrides):
        base = dict(batch=2, patch=16, iterations=1000, log_every=10, checkpoint_every=250)
        base.update(overrides)
        return cls(**base)


@dataclass
class DataConfig:
    root: str = "data"
    clips: int = 8
    frames: int = 10
    size: int = 128
    displacement: float = 32.0
    pattern: str = "translate"
    format: str = "png"
    seed: int = 0

    def __post_init__(self):
        if self.format not in ("png", "ppm"):
            raise ConfigError(f"frame format must be png or ppm, got {self.format!r}")


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def desk(cls):
        return cls(ModelConfig.desk(), TrainConfig.desk(), DataConfig())


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def all_keys() -> dict:
    """{section: [(key, default), ...]} for help output."""
    out = {}
    for name, cls in SECTIONS.items():
        inst = cls()
        out[name] = [(f.name, getattr(inst, f.name)) for f in fields(cls)]
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, kind, key):
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def parse_value(text: str, default, key: str):
    text = text.strip()
    if isinstance(default, tuple):
        if not text:
            return ()
        kind = type(default[0]) if default else str
        return tuple(_parse_scalar(t.strip(), kind, key) for t in text.split(","))
    return _parse_scalar(text, type(default), key)


def parse(text: str, base: Config | None = None) -> Config:
    base = base or Config()
    values = {name: dataclasses.asdict(getattr(base, name)) for name in SECTIONS}
    defaults = {name: dataclasses.asdict(cls()) for name, cls in SECTIONS.items()}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: key outside of any [section]")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in defaults[section]:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        values[section][key] = parse_value(val, defaults[section][key], f"{section}.{key}")
    try:
        return Config(**{name: cls(**values[name]) for name, cls in SECTIONS.items()})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def serialize(cfg: Config) -> str:
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {format_value(v)}")
        lines.append("")
    return "\n".join(lines)


def load(path, base: Config | None = None) -> Config:
    with open(path) as fh:
        return parse(fh.read(), base)


def save(cfg: Config, path):
    with open(path, "w") as fh:
        fh.write(serialize(cfg))
