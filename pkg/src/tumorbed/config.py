"""Run configuration: defaults, JSON loading, flag overrides and echo."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .imaging import HsvBounds
from .inference import InferenceConfig
from .synth import OracleConfig


class ConfigError(ValueError):
    pass


@dataclass
class MiningConfig:
    strategy: str = "kmeans"
    k: int = 3000
    m: int = 7
    m_total: int = 21000
    batch_size: int = 1024
    max_iters: int = 100
    tol: float = 1e-4
    weighting: str = "equal"
    oversample_base: int = 2


@dataclass
class RunConfig:
    side: int = 512
    stride: int = 256
    tau: float = 0.5
    fg_threshold: float = 0.25
    hsv: HsvBounds = field(default_factory=HsvBounds)
    mpp: float | None = None
    classifier: str = "oracle"
    oracle: OracleConfig = field(default_factory=OracleConfig)
    protocol_timeout: float = 30.0
    workers: int = 1
    dice_cell_size: int = 32
    mining: MiningConfig = field(default_factory=MiningConfig)
    seed: int = 0
    out: str = "out"

    def validate(self) -> "RunConfig":
        if self.side <= 0 or self.stride <= 0 or self.stride > self.side:
            raise ConfigError(f"need 0 < stride <= side, got stride={self.stride} side={self.side}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        if not 0.0 <= self.fg_threshold <= 1.0:
            raise ConfigError("fg_threshold must be in [0, 1]")
        if self.mpp is not None and not self.mpp > 0:
            raise ConfigError("mpp must be positive")
        if self.mining.strategy not in ("kmeans", "random", "none"):
            raise ConfigError(f"unknown mining strategy {self.mining.strategy!r}")
        if self.dice_cell_size < 1 or self.workers < 1:
            raise ConfigError("dice_cell_size and workers must be >= 1")
        kind = self.classifier.split(":", 1)[0]
        if kind not in ("oracle", "scores", "proto"):
            raise ConfigError(f"classifier must be oracle, scores:PATH or proto:ADDR, got {self.classifier!r}")
        return self

    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            side=self.side,
            stride=self.stride,
            tau=self.tau,
            fg_threshold=self.fg_threshold,
            hsv=self.hsv,
            workers=self.workers,
        )

    def oracle_config(self) -> OracleConfig:
        return dataclasses.replace(self.oracle, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        doc = dict(doc)
        nested = {"hsv": HsvBounds, "oracle": OracleConfig, "mining": MiningConfig}
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in doc.items():
            if key in nested:
                sub = nested[key]
                sub_names = {f.name for f in dataclasses.fields(sub)}
                if not isinstance(value, dict) or set(value) - sub_names:
                    raise ConfigError(f"bad {key} section: {value!r}")
                try:
                    value = sub(**value)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"bad {key} section: {exc}") from exc
            kwargs[key] = value
        try:
            return cls(**kwargs).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return RunConfig.from_dict(doc)


def apply_overrides(cfg: RunConfig, **flags) -> RunConfig:
    """Flags that are not ``None`` replace config values (dotted keys reach nested sections)."""
    for key, value in flags.items():
        if value is None:
            continue
        if "." in key:
            section, name = key.split(".", 1)
            sub = getattr(cfg, section)
            if dataclasses.is_dataclass(sub) and getattr(sub, "__dataclass_params__").frozen:
                setattr(cfg, section, dataclasses.replace(sub, **{name: value}))
            else:
                setattr(sub, name, value)
        else:
            setattr(cfg, key, value)
    return cfg.validate()
