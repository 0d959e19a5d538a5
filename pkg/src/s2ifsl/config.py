"""Experiment configuration: nested frozen dataclasses with a YAML round-trip and content hash."""
from __future__ import annotations

import dataclasses
import enum
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .adaptation import AdaptationConfig, AugmentationSpec
from .baselines import FixMatchConfig, GraphConfig
from .model import config_hash
from .refinement import RefinementConfig
from .sampler import SamplerConfig
from .synthetic import SyntheticSpec
from .training import TrainConfig
from .types import EpisodeSpec, Mode, ValidationError

__all__ = ["ModelSpec", "EvalSpec", "ExperimentConfig", "to_plain", "from_plain", "METHODS",
           "default_pretrain_config", "AugmentationSpec"]

METHODS = ("baseline", "pr", "adapt", "graph", "fixmatch")


@dataclass(frozen=True)
class ModelSpec:
    hidden: tuple[int, ...] = (64, 64)
    d: int | None = 16
    activation: str = "elu"
    gamma_init: float = 10.0
    seed: int = 0


def _default_test_episode() -> EpisodeSpec:
    return EpisodeSpec(n_way=5, k_shot=1, n_query_novel=75, n_query_base=75,
                       n_unlabeled_novel=150, n_unlabeled_base=150, mode=Mode.SEMI_SUPERVISED)


@dataclass(frozen=True)
class EvalSpec:
    """Test-episode stream and which methods/ratios to score on it.

    ``ratio`` splits the unlabeled total between base and novel pools (base
    first) in semi-supervised mode; ``sweep_ratios`` drives the sweep stage and
    ``sweep_reference`` is the ratio the degradation is measured against.
    """

    episode: EpisodeSpec = field(default_factory=_default_test_episode)
    n_episodes: int = 600
    stream_seed: int = 2022
    ratio: tuple[int, int] = (1, 1)
    sweep_ratios: tuple[tuple[int, int], ...] = ((3, 1), (1, 1), (1, 3))
    sweep_reference: tuple[int, int] = (1, 1)
    methods: tuple[str, ...] = ("baseline", "pr", "adapt")
    scatter_episode: int = 0

    def __post_init__(self):
        if self.n_episodes < 1:
            raise ValidationError("n_episodes must be >= 1")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValidationError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")

    def sampler(self, mode: Mode | str | None = None, ratio=None) -> SamplerConfig:
        spec = self.episode if mode is None else self.episode.replace(mode=Mode(mode))
        return SamplerConfig(spec, tuple(ratio or self.ratio), self.stream_seed)


def default_pretrain_config() -> TrainConfig:
    return TrainConfig(eta1=0.05, eta2=0.05, steps=30, batch_size=64, momentum=0.9)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a pipeline run depends on.

    ``bundle_path`` (a saved dataset file) takes precedence over the synthetic
    generator. ``output_dir`` is excluded from the content hash so a run can be
    relocated without invalidating its artifacts.
    """

    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    data_seed: int = 0
    bundle_path: str | None = None
    model: ModelSpec = field(default_factory=ModelSpec)
    pretrain: TrainConfig = field(default_factory=default_pretrain_config)
    metatrain: TrainConfig = field(default_factory=TrainConfig)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    fixmatch: FixMatchConfig = field(default_factory=FixMatchConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    checkpoint_every: int = 500
    output_dir: str = "runs/default"

    @property
    def hash(self) -> str:
        plain = to_plain(self)
        plain.pop("output_dir")
        return config_hash(plain)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_yaml(self) -> str:
        return yaml.safe_dump(to_plain(self), sort_keys=False)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return from_plain(cls, yaml.safe_load(text) or {})

    def save(self, path) -> None:
        Path(path).write_text(f"# config_hash={self.hash}\n" + self.to_yaml())

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())


def to_plain(obj):
    """Convert a config tree to YAML-safe builtins (dicts, lists, scalars)."""
    if isinstance(obj, EpisodeSpec):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj):
        return {f.name: to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (tuple, list)):
        return [to_plain(v) for v in obj]
    return obj


def _coerce(tp, value, where: str):
    origin, args = typing.get_origin(tp), typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _coerce(inner, value, where)
    if tp is EpisodeSpec:
        if not isinstance(value, dict):
            raise ValidationError(f"{where}: expected a mapping")
        return EpisodeSpec(**value)
    if dataclasses.is_dataclass(tp):
        return from_plain(tp, value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ValidationError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ValidationError(f"{where}: expected {tp.__name__}, got {value!r}")
    if tp is int and isinstance(value, bool):
        raise ValidationError(f"{where}: expected int, got {value!r}")
    return value


def from_plain(cls, data: dict, where: str = "config"):
    """Inverse of :func:`to_plain`; missing keys take defaults, unknown keys are errors."""
    if not isinstance(data, dict):
        raise ValidationError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValidationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    return cls(**kwargs)
