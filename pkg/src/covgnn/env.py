"""Discrete-time multi-robot coverage and exploration environment."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .spatial_graph import MAX_DEGREE, SpatialGraph

STAY = -1
COVERAGE = "coverage"
EXPLORATION = "exploration"
MODES = (COVERAGE, EXPLORATION)


class IllegalActionError(ValueError):
    """An action targets a waypoint that is not adjacent to the robot."""


@dataclass
class WorldState:
    graph: SpatialGraph
    robot_at: np.ndarray
    interest: np.ndarray
    explored: np.ndarray
    timestep: int = 0
    horizon: int = 50
    mode: str = COVERAGE
    sensor_range: float = float("inf")

    @property
    def n_robots(self) -> int:
        return len(self.robot_at)

    @property
    def remaining(self) -> int:
        return self.horizon - self.timestep

    def copy(self) -> "WorldState":
        return replace(
            self,
            robot_at=self.robot_at.copy(),
            interest=self.interest.copy(),
            explored=self.explored.copy(),
        )

    def known(self) -> np.ndarray:
        """Waypoints visible to on-line controllers."""
        if self.mode == EXPLORATION:
            return self.explored
        return np.ones(self.graph.n, dtype=bool)


def sense(graph: SpatialGraph, at: Sequence[int], sensor_range: float) -> np.ndarray:
    """Waypoints within ``sensor_range`` meters of any of the waypoints in ``at``."""
    out = np.zeros(graph.n, dtype=bool)
    if np.isinf(sensor_range):
        out[:] = True
        return out
    pos = graph.positions
    for w in at:
        d = np.hypot(pos[:, 0] - pos[w, 0], pos[:, 1] - pos[w, 1])
        out |= d <= sensor_range
    return out


def reset(
    graph: SpatialGraph,
    n_robots: int,
    interest_fraction: float = 1.0,
    mode: str = COVERAGE,
    sensor_range: float | None = None,
    horizon: int = 50,
    rng: np.random.Generator | None = None,
) -> WorldState:
    """Place robots on distinct random waypoints and draw the interest set.

    ``sensor_range`` defaults to twice the lattice spacing and only matters in
    exploration mode.
    """
    if not 1 <= n_robots <= graph.n:
        raise ValueError(f"cannot place {n_robots} robots on {graph.n} waypoints")
    if not 0 < interest_fraction <= 1:
        raise ValueError("interest_fraction must lie in (0, 1]")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    rng = np.random.default_rng() if rng is None else rng
    if sensor_range is None:
        sensor_range = 2.0 * graph.spacing
    robots = rng.choice(graph.n, size=n_robots, replace=False).astype(np.int64)
    free = np.setdiff1d(np.arange(graph.n), robots)
    n_interest = int(round(interest_fraction * len(free)))
    interest = np.zeros(graph.n, dtype=bool)
    if n_interest:
        interest[rng.choice(free, size=n_interest, replace=False)] = True
    if mode == EXPLORATION:
        explored = sense(graph, robots, sensor_range)
    else:
        explored = np.ones(graph.n, dtype=bool)
        sensor_range = float("inf")
    return WorldState(graph, robots, interest, explored, 0, int(horizon), mode, float(sensor_range))


def resolve_moves(positions: Sequence[int], targets: Sequence[int]) -> list[int]:
    """Apply the priority collision rule and return post-move positions.

    Robots are processed in ascending index. A robot moves unless its target is
    the post-move position of a smaller-indexed robot or the held position of a
    robot that stays. Robots forced to stay are added to the held set and the
    pass repeats until no two robots share a waypoint.
    """
    n = len(positions)
    held = [t == STAY or t == p for p, t in zip(positions, targets)]
    while True:
        final = list(positions)
        held_at = {positions[j]: j for j in range(n) if held[j]}
        claimed: set[int] = set()
        for i in range(n):
            if held[i]:
                claimed.add(positions[i])
                continue
            t = targets[i]
            h = held_at.get(t)
            if t in claimed or (h is not None and h != i):
                final[i] = positions[i]
            else:
                final[i] = t
            claimed.add(final[i])
        newly = [i for i in range(n) if not held[i] and final[i] == positions[i]]
        if len(set(final)) == n or not newly:
            return final
        for i in newly:
            held[i] = True


def step(state: WorldState, action: Sequence[int]) -> tuple[WorldState, int]:
    """Advance one timestep; returns the new state and the number of interest waypoints claimed."""
    if state.timestep >= state.horizon:
        raise ValueError("episode already finished")
    if len(action) != state.n_robots:
        raise IllegalActionError(f"expected {state.n_robots} actions, got {len(action)}")
    nbrs = state.graph.neighbors
    pos = [int(p) for p in state.robot_at]
    tgt = []
    for i, (p, t) in enumerate(zip(pos, action)):
        t = int(t)
        if t != STAY and t != p and t not in nbrs[p]:
            raise IllegalActionError(f"robot {i} at {p} cannot move to {t}")
        tgt.append(STAY if t == p else t)
    final = resolve_moves(pos, tgt)
    assert len(set(final)) == len(final), "co-located robots after collision resolution"

    new = state.copy()
    new.robot_at = np.array(final, dtype=np.int64)
    claimed = {w for w in final if new.interest[w]}
    reward = len(claimed)
    for w in claimed:
        new.interest[w] = False
    if state.mode == EXPLORATION:
        new.explored |= sense(state.graph, final, state.sensor_range)
    new.timestep += 1
    return new, reward


@dataclass(frozen=True, eq=False)
class GraphSignal:
    """Typed computation graph handed to the policy.

    Nodes are the (known) waypoints in ascending id order followed by one node
    per robot. ``action_edge_ids[r]`` holds the ids of the waypoint-to-robot
    edges for robot ``r``'s candidate moves, ascending by waypoint id, padded
    with -1 to four slots; ``action_mask`` flags the real slots.
    """

    node_features: np.ndarray
    edge_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    robot_node_ids: np.ndarray
    action_edge_ids: np.ndarray
    action_mask: np.ndarray
    action_targets: np.ndarray
    node_waypoint: np.ndarray
    spacing: float

    @property
    def n_nodes(self) -> int:
        return len(self.node_features)

    @property
    def n_edges(self) -> int:
        return len(self.senders)

    @property
    def n_robots(self) -> int:
        return len(self.robot_node_ids)

    def normalized_edge_features(self) -> np.ndarray:
        return (self.edge_features / self.spacing)[:, None]

    def to_dict(self) -> dict:
        return {
            "node_features": self.node_features.astype(int).tolist(),
            "edge_features": self.edge_features.tolist(),
            "senders": self.senders.tolist(),
            "receivers": self.receivers.tolist(),
            "robot_node_ids": self.robot_node_ids.tolist(),
            "action_edge_ids": self.action_edge_ids.tolist(),
            "action_mask": self.action_mask.astype(int).tolist(),
            "action_targets": self.action_targets.tolist(),
            "node_waypoint": self.node_waypoint.tolist(),
            "spacing": self.spacing,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraphSignal":
        i64 = lambda k: np.asarray(d[k], dtype=np.int64)  # noqa: E731
        return cls(
            node_features=np.asarray(d["node_features"], dtype=np.float64),
            edge_features=np.asarray(d["edge_features"], dtype=np.float64),
            senders=i64("senders"),
            receivers=i64("receivers"),
            robot_node_ids=i64("robot_node_ids"),
            action_edge_ids=i64("action_edge_ids").reshape(-1, MAX_DEGREE),
            action_mask=np.asarray(d["action_mask"], dtype=bool).reshape(-1, MAX_DEGREE),
            action_targets=i64("action_targets").reshape(-1, MAX_DEGREE),
            node_waypoint=i64("node_waypoint"),
            spacing=float(d["spacing"]),
        )

    def equals(self, other: "GraphSignal") -> bool:
        return self.spacing == other.spacing and all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in (
                "node_features", "edge_features", "senders", "receivers", "robot_node_ids",
                "action_edge_ids", "action_mask", "action_targets", "node_waypoint",
            )
        )


def node_feature_dim(mode: str) -> int:
    """Robot flag, waypoint flag, interest flag, plus a frontier flag when exploring."""
    return 4 if mode == EXPLORATION else 3


def observe(state: WorldState) -> GraphSignal:
    graph = state.graph
    explore = state.mode == EXPLORATION
    n_feat = node_feature_dim(state.mode)
    s_all, r_all = graph.directed_edges

    if explore:
        known = state.explored
        wp = np.flatnonzero(known)
        remap = np.full(graph.n, -1, dtype=np.int64)
        remap[wp] = np.arange(len(wp))
        keep = known[s_all] & known[r_all]
        s_map, r_map = remap[s_all[keep]], remap[r_all[keep]]
        frontier = np.zeros(graph.n, dtype=bool)
        frontier[s_all[known[s_all] & ~known[r_all]]] = True
    else:
        wp = np.arange(graph.n)
        remap = wp
        s_map, r_map = s_all, r_all

    n_wp = len(wp)
    n_rob = state.n_robots
    feats = np.zeros((n_wp + n_rob, n_feat))
    feats[:n_wp, 1] = 1.0
    feats[:n_wp, 2] = state.interest[wp]
    if explore:
        feats[:n_wp, 3] = frontier[wp]
    feats[n_wp:, 0] = 1.0

    rob_s: list[int] = []
    rob_r: list[int] = []
    act_ids = np.full((n_rob, MAX_DEGREE), -1, dtype=np.int64)
    act_tgt = np.full((n_rob, MAX_DEGREE), -1, dtype=np.int64)
    base = len(s_map)
    for i, w in enumerate(state.robot_at):
        node = n_wp + i
        slot = 0
        for nb in graph.neighbors[w]:
            if remap[nb] < 0:
                continue
            rob_s += [node, int(remap[nb])]
            rob_r += [int(remap[nb]), node]
            act_ids[i, slot] = base + len(rob_s) - 1
            act_tgt[i, slot] = nb
            slot += 1
    senders = np.concatenate([s_map, np.array(rob_s, dtype=np.int64)])
    receivers = np.concatenate([r_map, np.array(rob_r, dtype=np.int64)])

    node_pos = np.vstack([graph.positions[wp], graph.positions[state.robot_at]])
    diff = node_pos[senders] - node_pos[receivers]
    dist = np.hypot(diff[:, 0], diff[:, 1])
    node_wp = np.concatenate([wp, np.full(n_rob, -1, dtype=np.int64)])
    return GraphSignal(
        node_features=feats,
        edge_features=dist,
        senders=senders,
        receivers=receivers,
        robot_node_ids=np.arange(n_wp, n_wp + n_rob, dtype=np.int64),
        action_edge_ids=act_ids,
        action_mask=act_ids >= 0,
        action_targets=act_tgt,
        node_waypoint=node_wp,
        spacing=float(graph.spacing),
    )


def batch_signals(signals: Sequence[GraphSignal]) -> GraphSignal:
    """Merge signals into one disjoint graph; edge features come out spacing-normalized."""
    node_off = np.cumsum([0] + [s.n_nodes for s in signals[:-1]])
    edge_off = np.cumsum([0] + [s.n_edges for s in signals[:-1]])
    act = np.concatenate(
        [np.where(s.action_mask, s.action_edge_ids + eo, -1) for s, eo in zip(signals, edge_off)]
    )
    return GraphSignal(
        node_features=np.concatenate([s.node_features for s in signals]),
        edge_features=np.concatenate([s.edge_features / s.spacing for s in signals]),
        senders=np.concatenate([s.senders + o for s, o in zip(signals, node_off)]),
        receivers=np.concatenate([s.receivers + o for s, o in zip(signals, node_off)]),
        robot_node_ids=np.concatenate([s.robot_node_ids + o for s, o in zip(signals, node_off)]),
        action_edge_ids=act,
        action_mask=np.concatenate([s.action_mask for s in signals]),
        action_targets=np.concatenate([s.action_targets for s in signals]),
        node_waypoint=np.concatenate([s.node_waypoint for s in signals]),
        spacing=1.0,
    )


Controller = Callable[[WorldState], Sequence[int]]


@dataclass
class Trajectory:
    positions: list[np.ndarray] = field(default_factory=list)
    actions: list[list[int]] = field(default_factory=list)
    rewards: list[int] = field(default_factory=list)


def rollout(state: WorldState, controller: Controller, horizon: int | None = None) -> tuple[int, Trajectory]:
    """Run ``controller`` closed-loop for ``horizon`` steps (default: until the episode ends)."""
    steps = state.remaining if horizon is None else min(horizon, state.remaining)
    if hasattr(controller, "reset"):
        controller.reset(state)
    traj = Trajectory(positions=[state.robot_at.copy()])
    total = 0
    for _ in range(steps):
        action = [int(a) for a in controller(state)]
        state, r = step(state, action)
        total += r
        traj.actions.append(action)
        traj.rewards.append(r)
        traj.positions.append(state.robot_at.copy())
    return total, traj
