"""Run configuration: one JSON document covering data, model, training and evaluation.

A single top-level ``seed`` drives data generation, weight initialisation
and batch order; the ``SPIGA_SEED`` environment variable overrides it.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .errors import ConfigError
from .metrics import NORM_KINDS
from .regressor import CascadeConfig
from .synthdata import SynthConfig
from .training import TrainConfig

CONFIG_VERSION = 1
SEED_ENV = "SPIGA_SEED"


def desk_cascade_config(**kw) -> CascadeConfig:
    """Cascade sized to train in about a minute per run on one CPU core."""
    base = dict(num_landmarks=68, channels=8, dim=32, visual_hidden=32, posenc_hidden=256, gat_layers=2)
    base.update(kw)
    return CascadeConfig(**base)


def desk_train_config(**kw) -> TrainConfig:
    base = dict(lr=1e-3, epochs=3, batch_size=16, milestones=(100,))
    base.update(kw)
    return TrainConfig(**base)


@dataclass(frozen=True)
class EvalConfig:
    norm: str = "inter_ocular"
    thresholds: tuple[float, ...] = (10.0,)

    def __post_init__(self):
        if self.norm not in NORM_KINDS:
            raise ConfigError(f"eval norm must be one of {NORM_KINDS}")
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(t <= 0 for t in th):
            raise ConfigError("eval thresholds must be positive and non-empty")
        object.__setattr__(self, "thresholds", th)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train_count: int = 2000
    test_count: int = 500
    data: SynthConfig = field(default_factory=SynthConfig)
    cascade: CascadeConfig = field(default_factory=desk_cascade_config)
    train: TrainConfig = field(default_factory=desk_train_config)
    backbone: BackboneConfig | None = None
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.train_count < 1 or self.test_count < 0:
            raise ConfigError("train_count must be >= 1 and test_count >= 0")
        c, d = self.cascade, self.data
        if c.channels != d.channels:
            raise ConfigError(f"cascade reads {c.channels} channels but data has {d.channels}")
        if c.image_side != d.image_side or c.feature_side != d.feature_side:
            raise ConfigError("cascade and data disagree on image or feature side")
        b = self.backbone
        if b is not None and (b.channels != c.channels or b.input_side != c.image_side or b.feature_side != c.feature_side):
            raise ConfigError("backbone output must match the cascade input")

    def split(self, name: str) -> SynthConfig:
        """Data config of one split; splits use distinct seed streams."""
        count = {"train": self.train_count, "test": self.test_count}[name]
        offset = {"train": 0, "test": 1}[name]
        return dataclasses.replace(self.data, seed=self.seed * 2 + offset, count=count)

    def to_dict(self) -> dict:
        d = {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "train_count": self.train_count,
            "test_count": self.test_count,
            "data": self.data.to_dict(),
            "cascade": self.cascade.to_dict(),
            "train": self.train.to_dict(),
            "backbone": None if self.backbone is None else self.backbone.to_dict(),
            "eval": {"norm": self.eval.norm, "thresholds": list(self.eval.thresholds)},
        }
        for k in ("seed", "count"):
            d["data"].pop(k)
        d["train"].pop("seed")
        return d

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "version" not in d:
            raise ConfigError("config needs a top-level 'version'")
        if d["version"] != CONFIG_VERSION:
            raise ConfigError(f"config version {d['version']} is not supported (expected {CONFIG_VERSION})")
        known = {"version", "seed", "train_count", "test_count", "data", "cascade", "train", "backbone", "eval"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        env = os.environ if env is None else env
        seed = d.get("seed", 0)
        if env.get(SEED_ENV) not in (None, ""):
            try:
                seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        if not isinstance(seed, int) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for section in ("data", "train"):
            for k in ("seed", "count"):
                if k in d.get(section, {}) and not (section == "train" and k == "count"):
                    raise ConfigError(f"'{section}.{k}' is set from the top level; remove it")
        data = SynthConfig.from_dict(dict(d.get("data", {})))
        # partial sections fill in from the desk defaults
        cascade = CascadeConfig.from_dict({**desk_cascade_config().to_dict(), **d.get("cascade", {})})
        train = TrainConfig.from_dict({**desk_train_config().to_dict(), **d.get("train", {}), "seed": seed})
        backbone = BackboneConfig.from_dict(d["backbone"]) if d.get("backbone") is not None else None
        ev = d.get("eval", {})
        unknown = set(ev) - {"norm", "thresholds"}
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        try:
            return cls(
                seed=seed,
                train_count=int(d.get("train_count", 2000)),
                test_count=int(d.get("test_count", 500)),
                data=data,
                cascade=cascade,
                train=train,
                backbone=backbone,
                eval=EvalConfig(**ev),
            )
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_run_config(path, env: dict | None = None) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return RunConfig.from_dict(doc, env)


def default_config_json() -> str:
    return json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True) + "\n"
