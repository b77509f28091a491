"""Run configuration: nested dataclasses serialised as INI sections."""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Input data that violates a contract (vocabulary, shapes, matches)."""


class IntegrityError(ValueError):
    """A checkpoint that does not fit the model its config describes."""


@dataclass
class BackboneConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    mlp_ratio: int = 4
    image_hw: tuple = (32, 16)
    channels: int = 3
    patch: int = 8
    vocab_size: int = 64
    text_len: int = 16
    init_std: float = 0.02
    ln_eps: float = 1e-5
    seed: int = 0

    def validate(self) -> None:
        h, w = self.image_hw
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image {h}x{w} not divisible by patch {self.patch}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_layers, self.mlp_ratio, self.vocab_size) < 1:
            raise ConfigError("backbone sizes must be positive")
        if self.text_len < 2:
            raise ConfigError("text_len must leave room for [BOS] and [EOS]")

    @property
    def n_patches(self) -> int:
        h, w = self.image_hw
        return (h // self.patch) * (w // self.patch)


@dataclass
class MoEConfig:
    n_experts: int = 6
    top_k: int = 2
    reduction: int = 8
    router_mode: str = "domain"
    n_prompts: int = 4
    adapter_input: str = "x"
    init_std: float = 0.02

    def validate(self, d_model: Optional[int] = None) -> None:
        if self.n_experts < 1:
            raise ConfigError("n_experts must be >= 1")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(f"top_k={self.top_k} must lie in [1, n_experts={self.n_experts}]")
        if self.router_mode not in ("standard", "domain"):
            raise ConfigError(f"router_mode must be 'standard' or 'domain', got {self.router_mode!r}")
        if self.adapter_input not in ("x", "ln"):
            raise ConfigError(f"adapter_input must be 'x' or 'ln', got {self.adapter_input!r}")
        if self.router_mode == "domain" and self.n_prompts < 1:
            raise ConfigError("domain router needs at least one prompt")
        if d_model is not None and d_model // self.reduction < 1:
            raise ConfigError(f"reduction {self.reduction} leaves no bottleneck for d={d_model}")


@dataclass
class LossConfig:
    alpha: float = 0.5
    tau: float = 0.02
    epsilon: float = 1e-8

    def validate(self) -> None:
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.tau <= 0:
            raise ConfigError("tau must be > 0")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")


@dataclass
class OptimConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32

    def validate(self) -> None:
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("optimizer settings out of range")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


@dataclass
class DataConfig:
    num_ids: int = 64
    num_test_ids: int = 16
    imgs_per_id: int = 4
    caps_per_img: int = 1
    n_attributes: int = 8
    noise: float = 0.1
    gap: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.num_ids < 2 or self.num_test_ids < 1:
            raise ConfigError("need at least 2 training and 1 test identity")
        if self.imgs_per_id < 1 or self.caps_per_img < 1:
            raise ConfigError("imgs_per_id and caps_per_img must be >= 1")
        if self.noise < 0:
            raise ConfigError("noise must be >= 0")


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    moe: MoEConfig = field(default_factory=MoEConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    seed: int = 0
    precision: int = 64

    def validate(self) -> "RunConfig":
        self.backbone.validate()
        self.moe.validate(self.backbone.d_model)
        self.loss.validate()
        self.optim.validate()
        self.data.validate()
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        if self.data.n_attributes != self.backbone.n_patches:
            raise ConfigError(
                f"synthetic images place one block per attribute: n_attributes "
                f"{self.data.n_attributes} != patch count {self.backbone.n_patches}")
        return self

    def replace(self, **overrides) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``replace(**{"moe.top_k": 1})``."""
        cfg = from_dict(to_dict(self))
        for path, value in overrides.items():
            obj = cfg
            *parents, leaf = path.split(".")
            for part in parents:
                obj = getattr(obj, part)
            if not hasattr(obj, leaf):
                raise ConfigError(f"unknown config field {path!r}")
            setattr(obj, leaf, value)
        return cfg


_SECTIONS = ("backbone", "moe", "loss", "optim", "data")


def to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def from_dict(d: dict) -> RunConfig:
    kwargs = {}
    for f in dataclasses.fields(RunConfig):
        if f.name not in d:
            continue
        if f.name in _SECTIONS:
            sub_cls = type(f.default_factory())
            known = {sf.name for sf in dataclasses.fields(sub_cls)}
            unknown = set(d[f.name]) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{f.name}]: {sorted(unknown)}")
            sub = dict(d[f.name])
            if "image_hw" in sub:
                sub["image_hw"] = tuple(sub["image_hw"])
            kwargs[f.name] = sub_cls(**sub)
        else:
            kwargs[f.name] = d[f.name]
    return RunConfig(**kwargs)


def _parse_value(raw: str, default):
    try:
        if isinstance(default, bool):
            return {"true": True, "false": False}[raw.strip().lower()]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace("x", ",").split(","))
    except (KeyError, ValueError):
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser()
    parser["run"] = {"seed": str(cfg.seed), "precision": str(cfg.precision)}
    for name in _SECTIONS:
        sub = getattr(cfg, name)
        parser[name] = {f.name: _format_value(getattr(sub, f.name))
                        for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    cfg = RunConfig()
    for section in parser.sections():
        if section == "run":
            target = cfg
        elif section in _SECTIONS:
            target = getattr(cfg, section)
        else:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser[section].items():
            if not hasattr(target, key) or key in _SECTIONS:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            setattr(target, key, _parse_value(raw, getattr(target, key)))
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return loads(path.read_text())


def save(cfg: RunConfig, path) -> None:
    Path(path).write_text(dumps(cfg))


def fingerprint(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), sort_keys=True)
