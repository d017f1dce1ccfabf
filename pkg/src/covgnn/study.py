"""Content-addressed cache for datasets and trained policies.

Experiment scripts and the acceptance suite share expensive artifacts through
this module: each artifact lives under a key derived from every setting that
influences it, so changing a config never silently reuses stale results.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .baselines import ExpertConfig
from .env import node_feature_dim
from .gnn import ArchConfig, PolicyParams, load_checkpoint, save_checkpoint
from .imitation import Dataset, TrainConfig, collect_dataset, load_dataset, save_dataset, train_bc
from .scenarios import EpisodeConfig, MapConfig, Scenario

log = logging.getLogger(__name__)


def digest(*parts) -> str:
    blob = json.dumps([asdict(p) if hasattr(p, "__dataclass_fields__") else p for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Setup:
    """Training distribution plus the expert and collection settings."""

    map: MapConfig = MapConfig()
    episode: EpisodeConfig = EpisodeConfig()
    expert: ExpertConfig = field(default_factory=lambda: ExpertConfig(max_moves=3000))
    n_trajectories: int = 200
    seed: int = 1

    def scenario(self) -> Scenario:
        return Scenario(self.map, self.episode)


class ArtifactCache:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dataset(self, setup: Setup) -> Dataset:
        path = self.root / f"dataset-{digest(setup)}.jsonl"
        if path.exists():
            return load_dataset(path)
        log.info("collecting %d expert trajectories -> %s", setup.n_trajectories, path.name)
        ds = collect_dataset(setup.scenario(), setup.n_trajectories, setup.expert, setup.seed)
        tmp = path.with_suffix(".part")
        save_dataset(ds, tmp)
        tmp.replace(path)
        return ds

    def policy_path(self, setup: Setup, arch: ArchConfig, train: TrainConfig) -> Path:
        """Checkpoint file for (setup, arch, train), training it first if absent."""
        arch = replace(arch, node_dim=node_feature_dim(setup.episode.mode))
        path = self.root / f"policy-{digest(setup, arch, train)}.json"
        if not path.exists():
            ds = self.dataset(setup)
            log.info("training %s K=%d for %d epochs -> %s", arch.variant, arch.k, train.epochs, path.name)
            result = train_bc(ds, arch, train)
            tmp = path.with_suffix(".part")
            extra = {"final_train": result.epoch_train[-1], "final_val": result.epoch_val[-1]}
            save_checkpoint(result.params, tmp, extra=extra)
            tmp.replace(path)
        return path

    def policy(self, setup: Setup, arch: ArchConfig, train: TrainConfig) -> PolicyParams:
        return load_checkpoint(self.policy_path(setup, arch, train))
