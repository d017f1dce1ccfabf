"""Seeded map and episode distributions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .env import COVERAGE, WorldState, reset
from .spatial_graph import (
    DEFAULT_SPACING,
    SpatialGraph,
    build_lattice,
    graph_diameter,
    load_map,
    random_city,
    sample_submap,
)


@dataclass(frozen=True)
class MapConfig:
    """Where episode maps come from.

    ``source="city"`` builds one random obstacle city from ``city_seed`` and,
    when ``submap_size`` is set, samples a BFS region of roughly that many
    waypoints per episode (size jittered uniformly by +-``submap_jitter``).
    ``source="file"`` loads ``path`` instead of generating the city.
    """

    source: str = "city"
    path: str | None = None
    width: float = 200.0
    height: float = 200.0
    n_rects: int = 30
    rect_size: tuple[float, float] = (8.0, 32.0)
    n_discs: int = 10
    disc_radius: tuple[float, float] = (2.0, 6.0)
    spacing: float = DEFAULT_SPACING
    city_seed: int = 0
    submap_size: int | None = 60
    submap_jitter: float = 0.25
    min_diameter: int = 0


@dataclass(frozen=True)
class EpisodeConfig:
    n_robots: int = 2
    horizon: int = 25
    interest_fraction: float = 1.0
    mode: str = COVERAGE
    sensor_range: float | None = None


def base_map(cfg: MapConfig) -> SpatialGraph:
    if cfg.source == "file":
        if not cfg.path:
            raise ValueError("map source 'file' needs a path")
        return load_map(cfg.path)
    if cfg.source != "city":
        raise ValueError(f"unknown map source {cfg.source!r}")
    rng = np.random.default_rng(cfg.city_seed)
    om = random_city(
        rng, cfg.width, cfg.height, cfg.n_rects, tuple(cfg.rect_size), cfg.n_discs, tuple(cfg.disc_radius)
    )
    return build_lattice(om, cfg.spacing)


TRAIN_STREAM = 0
EVAL_STREAM = 1


def episode_rng(seed: int, index: int, stream: int = TRAIN_STREAM) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(stream), int(index)])


class Scenario:
    """Episode factory: ``episode(seed, i, ...)`` is a pure function of its arguments.

    Dataset collection draws from ``TRAIN_STREAM`` and evaluation from
    ``EVAL_STREAM`` so the two never share episodes under one seed.
    """

    def __init__(self, map_cfg: MapConfig = MapConfig(), ep_cfg: EpisodeConfig = EpisodeConfig()):
        self.map_cfg = map_cfg
        self.ep_cfg = ep_cfg
        self.base = base_map(map_cfg)

    def sample_map(self, rng: np.random.Generator) -> SpatialGraph:
        cfg = self.map_cfg
        if cfg.submap_size is None:
            return self.base
        for _ in range(1000):
            lo = max(1, int(round(cfg.submap_size * (1 - cfg.submap_jitter))))
            hi = min(self.base.n, int(round(cfg.submap_size * (1 + cfg.submap_jitter))))
            size = int(rng.integers(lo, hi + 1))
            g = sample_submap(self.base, size, rng)
            if cfg.min_diameter <= 0 or graph_diameter(g) >= cfg.min_diameter:
                return g
        raise RuntimeError(f"no submap with diameter >= {cfg.min_diameter} after 1000 draws")

    def episode(
        self, seed: int, index: int = 0, n_robots: int | None = None, stream: int = TRAIN_STREAM
    ) -> WorldState:
        rng = episode_rng(seed, index, stream)
        graph = self.sample_map(rng)
        e = self.ep_cfg
        return reset(
            graph,
            e.n_robots if n_robots is None else n_robots,
            e.interest_fraction,
            e.mode,
            e.sensor_range,
            e.horizon,
            rng,
        )
