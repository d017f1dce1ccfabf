"""Lattice graphs of waypoints over 2-D obstacle maps."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

DEFAULT_SPACING = 5.0
MAX_DEGREE = 4


class EmptyMapError(ValueError):
    """Raised when no free waypoint survives obstacle removal."""


class MapFormatError(ValueError):
    """Raised when a map file violates a lattice invariant."""


@dataclass(frozen=True)
class Rect:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return (
            (pts[:, 0] >= self.xmin)
            & (pts[:, 0] <= self.xmax)
            & (pts[:, 1] >= self.ymin)
            & (pts[:, 1] <= self.ymax)
        )

    def hits_segments(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        # Lattice segments are axis-aligned, so box overlap is exact.
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return (
            (lo[:, 0] <= self.xmax)
            & (hi[:, 0] >= self.xmin)
            & (lo[:, 1] <= self.ymax)
            & (hi[:, 1] >= self.ymin)
        )


@dataclass(frozen=True)
class Disc:
    cx: float
    cy: float
    radius: float

    def contains(self, pts: np.ndarray) -> np.ndarray:
        return np.hypot(pts[:, 0] - self.cx, pts[:, 1] - self.cy) <= self.radius

    def hits_segments(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        c = np.array([self.cx, self.cy])
        d = b - a
        dd = np.einsum("ij,ij->i", d, d)
        t = np.clip(np.einsum("ij,ij->i", c - a, d) / np.where(dd > 0, dd, 1.0), 0.0, 1.0)
        closest = a + t[:, None] * d
        return np.hypot(closest[:, 0] - c[0], closest[:, 1] - c[1]) <= self.radius


@dataclass(frozen=True)
class ObstacleMap:
    """Axis-aligned bounds plus rectangle and disc obstacles, in meters."""

    bounds: Rect
    obstacles: tuple[Rect | Disc, ...] = ()

    def __post_init__(self):
        b = self.bounds
        if not (b.xmax > b.xmin and b.ymax > b.ymin):
            raise ValueError(f"degenerate bounds {b}")
        for ob in self.obstacles:
            if isinstance(ob, Rect):
                inside = ob.xmin >= b.xmin and ob.xmax <= b.xmax and ob.ymin >= b.ymin and ob.ymax <= b.ymax
            else:
                inside = (
                    ob.cx - ob.radius >= b.xmin
                    and ob.cx + ob.radius <= b.xmax
                    and ob.cy - ob.radius >= b.ymin
                    and ob.cy + ob.radius <= b.ymax
                )
            if not inside:
                raise ValueError(f"obstacle {ob} leaves bounds {b}")


@dataclass(frozen=True, eq=False)
class SpatialGraph:
    """Immutable lattice of waypoints.

    ``neighbors[j]`` is the ascending tuple of waypoint ids adjacent to ``j``.
    """

    positions: np.ndarray
    neighbors: tuple[tuple[int, ...], ...]
    spacing: float = DEFAULT_SPACING

    def __post_init__(self):
        pos = np.array(self.positions, dtype=np.float64).reshape(-1, 2)
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        if len(self.neighbors) != len(pos):
            raise ValueError("positions and adjacency disagree in length")

    def __len__(self) -> int:
        return len(self.neighbors)

    @property
    def n(self) -> int:
        return len(self.neighbors)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SpatialGraph):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.neighbors == other.neighbors
            and np.array_equal(self.positions, other.positions)
        )

    __hash__ = object.__hash__

    @cached_property
    def directed_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """(senders, receivers) listing every adjacency in both directions, sender-major."""
        snd = [j for j, nb in enumerate(self.neighbors) for _ in nb]
        rcv = [k for nb in self.neighbors for k in nb]
        s = np.array(snd, dtype=np.int64)
        r = np.array(rcv, dtype=np.int64)
        s.setflags(write=False)
        r.setflags(write=False)
        return s, r

    @property
    def n_edges(self) -> int:
        return sum(len(nb) for nb in self.neighbors) // 2

    def edge_list(self) -> list[tuple[int, int]]:
        return [(j, k) for j, nb in enumerate(self.neighbors) for k in nb if j < k]

    @cached_property
    def hop_matrix(self) -> np.ndarray:
        """All-pairs hop distances; -1 marks unreachable pairs."""
        return hop_matrix(self)

    def check_invariants(self) -> None:
        """Raise MapFormatError on the first violated lattice invariant."""
        n = self.n
        for j, nb in enumerate(self.neighbors):
            if list(nb) != sorted(set(nb)):
                raise MapFormatError(f"adjacency of {j} not sorted/unique")
            if len(nb) > MAX_DEGREE:
                raise MapFormatError(f"waypoint {j} has degree {len(nb)} > {MAX_DEGREE}")
            for k in nb:
                if not 0 <= k < n:
                    raise MapFormatError(f"waypoint {j} lists unknown neighbor {k}")
                if k == j:
                    raise MapFormatError(f"self-loop at {j}")
                if j not in self.neighbors[k]:
                    raise MapFormatError(f"asymmetric adjacency {j}-{k}")
                d = float(np.hypot(*(self.positions[j] - self.positions[k])))
                if abs(d - self.spacing) > 1e-9 * self.spacing:
                    raise MapFormatError(f"edge {j}-{k} has length {d}, spacing is {self.spacing}")
        if n == 0:
            raise MapFormatError("graph has no waypoints")
        if len(k_hop_distances(self, 0, None)) != n:
            raise MapFormatError("graph is not connected")


def _grid_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    count = int(np.floor((hi - lo) / spacing + 1e-9)) + 1
    return lo + spacing * np.arange(count)


def build_lattice(obstacle_map: ObstacleMap, spacing: float = DEFAULT_SPACING) -> SpatialGraph:
    """Grid the free space of ``obstacle_map`` into a 4-connected waypoint lattice.

    Points inside an obstacle are dropped, edges whose segment touches an
    obstacle are dropped, and only the largest connected component is kept.
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    b = obstacle_map.bounds
    xs = _grid_axis(b.xmin, b.xmax, spacing)
    ys = _grid_axis(b.ymin, b.ymax, spacing)
    nx, ny = len(xs), len(ys)
    gx, gy = np.meshgrid(xs, ys)  # row-major over y, then x
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    free = np.ones(len(pts), dtype=bool)
    for ob in obstacle_map.obstacles:
        free &= ~ob.contains(pts)
    if not free.any():
        raise EmptyMapError("every lattice point lies inside an obstacle")

    idx = np.arange(nx * ny).reshape(ny, nx)
    right = np.column_stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()])
    up = np.column_stack([idx[:-1, :].ravel(), idx[1:, :].ravel()])
    pairs = np.vstack([right, up]) if len(right) or len(up) else np.zeros((0, 2), dtype=np.int64)
    pairs = pairs[free[pairs[:, 0]] & free[pairs[:, 1]]]
    ok = np.ones(len(pairs), dtype=bool)
    a, c = pts[pairs[:, 0]], pts[pairs[:, 1]]
    for ob in obstacle_map.obstacles:
        ok &= ~ob.hits_segments(a, c)
    pairs = pairs[ok]

    adj: dict[int, list[int]] = {int(i): [] for i in np.flatnonzero(free)}
    for i, j in pairs.tolist():
        adj[i].append(j)
        adj[j].append(i)

    # largest component; ties go to the one holding the smallest id
    seen: set[int] = set()
    best: list[int] = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = [start]
        seen.add(start)
        q = deque([start])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    comp.append(v)
                    q.append(v)
        if len(comp) > len(best):
            best = comp
    keep = sorted(best)
    remap = {old: new for new, old in enumerate(keep)}
    neighbors = tuple(tuple(sorted(remap[v] for v in adj[old])) for old in keep)
    return SpatialGraph(pts[keep], neighbors, float(spacing))


def induced_subgraph(graph: SpatialGraph, nodes) -> SpatialGraph:
    keep = sorted(set(int(v) for v in nodes))
    remap = {old: new for new, old in enumerate(keep)}
    neighbors = tuple(
        tuple(sorted(remap[v] for v in graph.neighbors[old] if v in remap)) for old in keep
    )
    return SpatialGraph(graph.positions[keep], neighbors, graph.spacing)


def sample_submap(graph: SpatialGraph, target_size: int, rng: np.random.Generator) -> SpatialGraph:
    """Grow a BFS ball of ``target_size`` waypoints from a uniformly random seed."""
    if not 1 <= target_size <= graph.n:
        raise ValueError(f"target_size {target_size} outside [1, {graph.n}]")
    seed = int(rng.integers(graph.n))
    picked = [seed]
    seen = {seed}
    q = deque([seed])
    while q and len(picked) < target_size:
        u = q.popleft()
        for v in graph.neighbors[u]:
            if v not in seen:
                seen.add(v)
                picked.append(v)
                q.append(v)
                if len(picked) == target_size:
                    break
    return induced_subgraph(graph, picked)


def bfs_hops(neighbors, source: int, limit: int | None = None, allowed=None) -> dict[int, int]:
    """Hop distances from ``source``; ``allowed`` optionally masks traversable nodes."""
    dist = {source: 0}
    q = deque([source])
    while q:
        u = q.popleft()
        du = dist[u]
        if limit is not None and du >= limit:
            continue
        for v in neighbors[u]:
            if v not in dist and (allowed is None or allowed[v]):
                dist[v] = du + 1
                q.append(v)
    return dist


def k_hop_distances(graph: SpatialGraph, source: int, k: int | None) -> dict[int, int]:
    """Breadth-first hop counts from ``source``, truncated at ``k`` hops (None = unbounded)."""
    if not 0 <= source < graph.n:
        raise IndexError(f"waypoint {source} not in graph")
    if k is not None and k < 0:
        raise ValueError("k must be non-negative")
    return bfs_hops(graph.neighbors, source, k)


def hop_matrix(graph: SpatialGraph, allowed: np.ndarray | None = None) -> np.ndarray:
    """All-pairs hop counts via scipy's unweighted shortest paths; -1 where unreachable."""
    n = graph.n
    s, r = graph.directed_edges
    if allowed is not None:
        keep = allowed[s] & allowed[r]
        s, r = s[keep], r[keep]
    m = csr_matrix((np.ones(len(s)), (s, r)), shape=(n, n))
    d = shortest_path(m, method="D", unweighted=True, directed=False)
    out = np.where(np.isinf(d), -1, d).astype(np.int64)
    if allowed is not None:
        out[~allowed, :] = -1
        out[:, ~allowed] = -1
    return out


def graph_diameter(graph: SpatialGraph) -> int:
    d = graph.hop_matrix
    if (d < 0).any():
        raise ValueError("graph is not connected")
    return int(d.max())


# --- map generation -------------------------------------------------------


def random_city(
    rng: np.random.Generator,
    width: float = 200.0,
    height: float = 200.0,
    n_rects: int = 30,
    rect_size: tuple[float, float] = (8.0, 32.0),
    n_discs: int = 10,
    disc_radius: tuple[float, float] = (2.0, 6.0),
) -> ObstacleMap:
    """Random buildings (rectangles) and pillars (discs) scattered over a rectangle."""
    obs: list[Rect | Disc] = []
    for _ in range(n_rects):
        w, h = rng.uniform(*rect_size, size=2)
        x = rng.uniform(0.0, max(width - w, 1e-9))
        y = rng.uniform(0.0, max(height - h, 1e-9))
        obs.append(Rect(float(x), float(y), float(x + w), float(y + h)))
    for _ in range(n_discs):
        r = float(rng.uniform(*disc_radius))
        cx = float(rng.uniform(r, width - r))
        cy = float(rng.uniform(r, height - r))
        obs.append(Disc(cx, cy, r))
    return ObstacleMap(Rect(0.0, 0.0, width, height), tuple(obs))


# --- file format ----------------------------------------------------------


def graph_to_dict(graph: SpatialGraph) -> dict:
    return {
        "spacing": graph.spacing,
        "positions": graph.positions.tolist(),
        "edges": [list(e) for e in graph.edge_list()],
    }


def graph_from_dict(doc: dict) -> SpatialGraph:
    try:
        spacing = float(doc["spacing"])
        positions = np.asarray(doc["positions"], dtype=np.float64)
        edges = [tuple(int(v) for v in e) for e in doc["edges"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MapFormatError(f"malformed map document: {exc}") from exc
    if spacing <= 0:
        raise MapFormatError("spacing must be positive")
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise MapFormatError("positions must be an array of [x, y] pairs")
    n = len(positions)
    adj: list[set[int]] = [set() for _ in range(n)]
    for e in edges:
        if len(e) != 2:
            raise MapFormatError(f"edge {e} is not a pair")
        i, j = e
        if not (0 <= i < n and 0 <= j < n):
            raise MapFormatError(f"edge {e} references unknown waypoint")
        if i >= j:
            raise MapFormatError(f"edge {e} must satisfy i < j")
        if j in adj[i]:
            raise MapFormatError(f"duplicate edge {e}")
        adj[i].add(j)
        adj[j].add(i)
    graph = SpatialGraph(positions, tuple(tuple(sorted(a)) for a in adj), spacing)
    graph.check_invariants()
    return graph


def save_map(graph: SpatialGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph_to_dict(graph)) + "\n")


def load_map(path: str | Path) -> SpatialGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MapFormatError(f"{path}: not valid JSON ({exc})") from exc
    return graph_from_dict(doc)
