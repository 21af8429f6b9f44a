"""Run configuration: one TOML document holding every knob of a run.

Unknown keys are rejected at every level; the resolved document is archived
next to a run's outputs so the run can be repeated from it alone.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

import tomli
import tomli_w

from .dit import ConfigError, ModelConfig
from .flow import TrainConfig
from .semantic import EncoderConfig
from .synth import SceneSpec


@dataclass
class DataSection:
    dir: str = "data"
    count: int = 640
    ratios: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    split_seed: int = 0

    def validate(self) -> None:
        if self.count < 1:
            raise ConfigError("data.count must be >= 1")
        r = self.ratios
        if len(r) != 3 or any(not isinstance(x, (int, float)) or x < 0 for x in r) or abs(sum(r) - 1) > 1e-9:
            raise ConfigError(f"data.ratios must be three non-negative numbers summing to 1, got {r}")


@dataclass
class TrainSection:
    steps: int = 5000
    batch_size: int = 4
    checkpoint_every: int = 500
    log_every: int = 50
    val_every: int = 0  # 0 disables validation during training
    val_count: int = 16
    out_dir: str = "runs/train"
    encoder: str = ""  # path to a pretrained encoder checkpoint
    resume: str = ""  # checkpoint to resume from
    checked: bool = False  # finite-value checks on every op; NaN aborts with a batch dump

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("train.steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("train.checkpoint_every and train.log_every must be >= 1")
        if self.val_every < 0 or self.val_count < 1:
            raise ConfigError("train.val_every must be >= 0 and train.val_count >= 1")


@dataclass
class SamplerSection:
    steps: int = 4

    def validate(self) -> None:
        if self.steps < 1:
            raise ConfigError("sampler.steps must be >= 1")


@dataclass
class PretrainSection:
    steps: int = 4000
    batch_size: int = 8
    lr: float = 1e-3
    out: str = "runs/encoder.ppdt"
    # > 0: pretrain on this many fresh scenes drawn with `scene_seed`, a corpus
    # disjoint from the diffusion dataset; 0: reuse the training split
    scenes: int = 4096
    scene_seed: int = 1

    def validate(self) -> None:
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("pretrain: steps >= 0, batch_size >= 1, lr > 0 required")
        if self.scenes < 0:
            raise ConfigError("pretrain.scenes must be >= 0")


@dataclass
class EvalSection:
    align: str = "log"
    low_pct: float = 70.0
    high_pct: float = 90.0
    dilation_radius: int = 2

    def validate(self) -> None:
        if self.align not in ("log", "metric", "none"):
            raise ConfigError(f"eval.align must be log, metric or none, got {self.align!r}")
        if not 0 <= self.low_pct <= self.high_pct <= 100:
            raise ConfigError("eval thresholds need 0 <= low_pct <= high_pct <= 100")
        if self.dilation_radius < 0:
            raise ConfigError("eval.dilation_radius must be >= 0")


_SECTIONS = {
    "data": DataSection,
    "scene": SceneSpec,
    "model": ModelConfig,
    "optim": TrainConfig,
    "train": TrainSection,
    "sampler": SamplerSection,
    "encoder": EncoderConfig,
    "pretrain": PretrainSection,
    "eval": EvalSection,
}
_TOP = {"seed": int, "strict": bool, "threads": int}


@dataclass
class RunConfig:
    seed: int = 0
    strict: bool = False
    threads: int = 0  # 0 = leave the BLAS default (PPD_THREADS still applies)
    data: DataSection = field(default_factory=DataSection)
    scene: SceneSpec = field(default_factory=SceneSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: TrainConfig = field(default_factory=TrainConfig)
    train: TrainSection = field(default_factory=TrainSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        for name in _SECTIONS:
            getattr(self, name).validate()
        if self.threads < 0:
            raise ConfigError("threads must be >= 0")
        if self.pretrain.scenes and self.pretrain.scene_seed == self.scene.seed:
            raise ConfigError("pretrain.scene_seed must differ from scene.seed to keep the corpora disjoint")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {k: getattr(self, k) for k in _TOP}
        for name in _SECTIONS:
            sec = getattr(self, name)
            d = sec.to_dict() if hasattr(sec, "to_dict") else asdict(sec)
            out[name] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items() if v is not None}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_TOP) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for k, typ in _TOP.items():
            if k in d:
                if not isinstance(d[k], typ) or (typ is int and isinstance(d[k], bool)):
                    raise ConfigError(f"{k} must be {typ.__name__}, got {d[k]!r}")
                kwargs[k] = d[k]
        for name, sec_cls in _SECTIONS.items():
            sub = d.get(name, {})
            if not isinstance(sub, dict):
                raise ConfigError(f"[{name}] must be a table")
            kwargs[name] = _build(sec_cls, name, sub)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def _build(sec_cls, name: str, sub: dict):
    known = {f.name: f for f in fields(sec_cls)}
    unknown = set(sub) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
    defaults = sec_cls() if sec_cls is not ModelConfig else ModelConfig()
    for k, v in sub.items():
        want = getattr(defaults, k)
        if want is not None and not _type_ok(want, v):
            raise ConfigError(f"{name}.{k} should be {type(want).__name__}, got {v!r}")
    if hasattr(sec_cls, "from_dict"):
        try:
            return sec_cls.from_dict(dict(sub))
        except TypeError as e:
            raise ConfigError(f"[{name}]: {e}") from None
    return sec_cls(**sub)


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, (list, tuple)):
        return isinstance(value, (list, tuple))
    return isinstance(value, type(default))


def load(path: Optional[Union[str, Path]] = None, overrides: Optional[list[str]] = None) -> RunConfig:
    """Defaults <- TOML file <- ``section.key=value`` overrides (TOML values)."""
    d: dict = {}
    if path:
        try:
            with open(path, "rb") as f:
                d = tomli.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    for item in overrides or []:
        apply_override(d, item)
    return RunConfig.from_dict(d)


def apply_override(d: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()  # bare strings need no quotes
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a table")
    node[parts[-1]] = value


def merged(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    d = copy.deepcopy(cfg.to_dict())
    for item in overrides:
        apply_override(d, item)
    return RunConfig.from_dict(d)
