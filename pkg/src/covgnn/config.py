"""Experiment configuration: nested dataclasses loaded from YAML (or JSON)."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .baselines import ExpertConfig
from .env import MODES
from .gnn import ArchConfig
from .imitation import TrainConfig
from .scenarios import EpisodeConfig, MapConfig

CONTROLLERS = ("gnn", "greedy", "expert-rh", "expert-openloop", "oracle")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CollectConfig:
    n_trajectories: int = 200


@dataclass(frozen=True)
class GenerateConfig:
    count: int = 1


@dataclass(frozen=True)
class EvalConfig:
    n_episodes: int = 100
    controllers: tuple[str, ...] = ("greedy",)
    checkpoint: str | None = None
    greedy_k: int | None = None
    selection: str = "argmax"
    # extra tables: greedy swept over these K, GNN over the listed checkpoints
    k_sweep: tuple[int, ...] = ()
    sweep_checkpoints: tuple[str, ...] = ()
    team_sizes: tuple[int, ...] = ()
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    map: MapConfig = MapConfig()
    episode: EpisodeConfig = EpisodeConfig()
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    expert: ExpertConfig = ExpertConfig()
    collect: CollectConfig = CollectConfig()
    generate: GenerateConfig = GenerateConfig()
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: str | None = None
    out_dir: str = "runs/default"
    seed: int = 0

    def validate(self, controllers: bool = True) -> "ExperimentConfig":
        """Raise ConfigError on the first problem; ``controllers=False`` skips the eval section."""
        if self.episode.mode not in MODES:
            raise ConfigError(f"episode.mode must be one of {MODES}")
        checkpoints = [self.eval.checkpoint, *self.eval.sweep_checkpoints] if controllers else []
        for spec in self.eval.controllers if controllers else ():
            name, arg = parse_controller(spec)
            if name == "gnn":
                if arg is None and self.eval.checkpoint is None:
                    raise ConfigError("controller 'gnn' needs eval.checkpoint or the form gnn@<path>")
                checkpoints.append(arg)
        for path in [*checkpoints, self.dataset]:
            if path is not None and not Path(path).exists():
                raise ConfigError(f"referenced file {path} does not exist")
        if self.map.source == "file" and (not self.map.path or not Path(self.map.path).exists()):
            raise ConfigError(f"map file {self.map.path} does not exist")
        if self.eval.selection not in ("argmax", "sample"):
            raise ConfigError("eval.selection must be 'argmax' or 'sample'")
        if self.eval.workers < 1:
            raise ConfigError("eval.workers must be at least 1")
        return self


def parse_controller(spec: str) -> tuple[str, str | None]:
    """Split ``name[@arg]``: ``gnn@ck.json`` picks a checkpoint, ``greedy@3`` a hop limit."""
    name, _, arg = spec.partition("@")
    if name not in CONTROLLERS:
        raise ConfigError(f"unknown controller {name!r}; choose from {CONTROLLERS}")
    if name == "greedy" and arg:
        try:
            if int(arg) < 0:
                raise ValueError
        except ValueError:
            raise ConfigError(f"greedy hop limit must be a non-negative integer, got {arg!r}") from None
    elif arg and name != "gnn":
        raise ConfigError(f"controller {name!r} takes no argument")
    return name, arg or None


def _coerce(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return build(tp, value, where)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if tp in (int, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{where}: expected {tp.__name__}, got {value!r}")
    return value


def build(cls, data: dict, where: str = "config"):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build(ExperimentConfig, data)


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)
