"""Unified run configuration: one JSON document with strictly validated sections."""

from __future__ import annotations

import enum
import json
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

from .embed_net import EmbedConfig
from .errors import ConfigError
from .evaluation import Protocol
from .inference import InferenceConfig
from .losses import LossConfig
from .representatives import ProbConfig
from .synth_world import WorldConfig
from .trainer import TrainConfig

# inference knobs that live in the shared ``prob`` section instead
_PROB_FIELDS = ("beta", "sigma", "background_score")


def _default_of(f):
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:
        return f.default_factory()
    return None


def _check_type(section: str, key: str, value, default) -> None:
    where = f"{section}.{key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, (tuple, list)):
        ok = isinstance(value, (list, tuple))
    elif isinstance(default, (str, enum.Enum)):
        ok = isinstance(value, str)
    else:
        # optional number such as nms_iou
        ok = value is None or (isinstance(value, (int, float)) and not isinstance(value, bool))
    if not ok:
        raise ConfigError(f"{where}: unexpected value {value!r}")


def _build(cls, section: str, doc, skip=()):
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name: f for f in fields(cls) if f.name not in skip}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in section {section!r}: {unknown}; valid keys: {sorted(known)}")
    for k, v in doc.items():
        _check_type(section, k, v, _default_of(known[k]))
    try:
        return cls(**doc)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def _section_dict(obj, skip=()) -> dict:
    return {f.name: _plain(getattr(obj, f.name)) for f in fields(obj) if f.name not in skip}


@dataclass(frozen=True)
class EvalConfig:
    way: int = 5
    shot: int = 1
    episodes: int = 200
    seed: int = 0
    queries_per_class: int = 2

    def __post_init__(self):
        if self.way < 1 or self.shot < 1 or self.queries_per_class < 1:
            raise ConfigError("way, shot and queries_per_class must be >= 1")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")

    def protocol(self) -> Protocol:
        return Protocol(self.way, self.shot, self.episodes, self.seed, self.queries_per_class)


SECTIONS = ("world", "embed", "prob", "loss", "train", "inference", "eval")


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    embed: EmbedConfig = field(default_factory=EmbedConfig)
    prob: ProbConfig = field(default_factory=ProbConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if not 0.0 < self.prob.beta < 1.0:
            raise ConfigError(f"prob.beta must lie in (0, 1), got {self.prob.beta}")
        if self.embed.input_dim != self.world.feature_dim:
            raise ConfigError(
                f"embed.input_dim ({self.embed.input_dim}) must equal world.feature_dim ({self.world.feature_dim})")
        if self.eval.way > self.world.n_novel_classes:
            raise ConfigError(f"eval.way ({self.eval.way}) exceeds world.n_novel_classes ({self.world.n_novel_classes})")
        # the inference view always carries the shared probability knobs
        inf = self.inference.with_(**{k: getattr(self.prob, k) for k in _PROB_FIELDS})
        object.__setattr__(self, "inference", inf)

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections {unknown}; valid sections: {list(SECTIONS)}")
        return cls(
            world=_build(WorldConfig, "world", doc.get("world")),
            embed=_build(EmbedConfig, "embed", doc.get("embed")),
            prob=_build(ProbConfig, "prob", doc.get("prob")),
            loss=_build(LossConfig, "loss", doc.get("loss")),
            train=_build(TrainConfig, "train", doc.get("train")),
            inference=_build(InferenceConfig, "inference", doc.get("inference"), skip=_PROB_FIELDS),
            eval=_build(EvalConfig, "eval", doc.get("eval")),
        )

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "embed": _section_dict(self.embed),
            "prob": asdict(self.prob),
            "loss": asdict(self.loss),
            "train": _section_dict(self.train),
            "inference": _section_dict(self.inference, skip=_PROB_FIELDS),
            "eval": asdict(self.eval),
        }

    def override(self, section: str, **kw) -> "RunConfig":
        """A copy with ``section`` fields replaced, re-validated as a whole."""
        doc = self.to_dict()
        doc[section].update({k: _plain(v) for k, v in kw.items()})
        return RunConfig.from_dict(doc)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return RunConfig.from_dict(doc)
