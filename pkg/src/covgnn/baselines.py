"""Planning and heuristic controllers.

The expert treats coverage as a prize-collecting team orienteering problem
over hop distances: every robot gets an ordered list of interest waypoints,
the list is expanded into a waypoint path along BFS shortest paths, and the
team plan is scored by replaying it under the environment's collision rule.
Routes are built by cheapest insertion and improved by simulated annealing
over insert / remove / swap / relocate / 2-opt / or-opt moves.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, replace

import numpy as np

from .env import EXPLORATION, STAY, WorldState, resolve_moves
from .spatial_graph import bfs_hops, hop_matrix

ORACLE_LIMIT = 10**7
UNREACHABLE = 10**6


class SearchSpaceError(ValueError):
    pass


@dataclass(frozen=True)
class ExpertConfig:
    """Annealing budget.

    ``time_limit`` (seconds) is off by default: a wall-clock cutoff makes plans
    depend on machine load, so runs are bounded by move counts instead.
    ``replan_moves`` is the per-step budget of the receding-horizon variant.
    """

    max_moves: int = 50_000
    time_limit: float | None = None
    plan_horizon: int = 10
    replan_moves: int = 300
    final_temperature_ratio: float = 1e-3


@dataclass
class RoutePlan:
    """Per-robot waypoint paths; ``paths[i][0]`` is robot i's current waypoint."""

    paths: list[list[int]]
    horizon: int
    score: int = 0

    def check(self, state: WorldState) -> None:
        nbrs = state.graph.neighbors
        for i, path in enumerate(self.paths):
            if path[0] != state.robot_at[i]:
                raise AssertionError(f"route {i} does not start at robot {i}")
            if len(path) - 1 > self.horizon:
                raise AssertionError(f"route {i} longer than horizon")
            for a, b in zip(path, path[1:]):
                if a != b and b not in nbrs[a]:
                    raise AssertionError(f"route {i} jumps {a}->{b}")


def simulate_paths(paths: list[list[int]], interest, horizon: int) -> int:
    """Reward of following ``paths`` under the priority collision rule.

    ``interest`` is either a boolean mask over waypoints or a set of waypoint ids.
    A blocked robot keeps its place in its path and retries next step.
    """
    if isinstance(interest, np.ndarray):
        interest = set(np.flatnonzero(interest).tolist())
    pos = [p[0] for p in paths]
    ptr = [0] * len(paths)
    got = set()
    for _ in range(horizon):
        tgt = [p[k + 1] if k + 1 < len(p) else STAY for p, k in zip(paths, ptr)]
        if all(t == STAY for t in tgt):
            break
        if len(paths) == 1:
            fin = [tgt[0]]
        else:
            fin = resolve_moves(pos, tgt)
        for i, (a, b) in enumerate(zip(pos, fin)):
            if a != b:
                ptr[i] += 1
                if b in interest:
                    got.add(b)
        pos = fin
    return len(got)


class _Planner:
    def __init__(self, nbrs, dist: np.ndarray, allowed, starts, targets, horizon, rng):
        self.nbrs = nbrs
        self.D = np.where(dist < 0, UNREACHABLE, dist)
        self.allowed = allowed
        self.starts = list(starts)
        self.targets = list(targets)
        self.interest = set(self.targets)
        self.H = horizon
        self.rng = rng
        self._paths: dict[tuple[int, int], list[int]] = {}

    def path(self, a: int, b: int) -> list[int]:
        """Shortest path a..b (exclusive of a); next hop is the smallest-id neighbor on a shortest path."""
        key = (a, b)
        p = self._paths.get(key)
        if p is None:
            p = []
            cur = a
            D = self.D
            while cur != b:
                need = D[cur, b] - 1
                cur = min(n for n in self.nbrs[cur] if self.allowed[n] and D[n, b] == need)
                p.append(cur)
            self._paths[key] = p
        return p

    def expand(self, routes: list[list[int]]) -> list[list[int]]:
        out = []
        for s, route in zip(self.starts, routes):
            full = [s]
            cur = s
            for t in route:
                if self.D[cur, t] >= UNREACHABLE:
                    continue
                full.extend(self.path(cur, t))
                cur = t
                if len(full) > self.H:
                    break
            out.append(full[: self.H + 1])
        return out

    def cost(self, start: int, route: list[int]) -> int:
        if not route:
            return 0
        seq = [start] + route
        return int(self.D[seq[:-1], seq[1:]].sum())

    def score(self, routes) -> float:
        reward = simulate_paths(self.expand(routes), self.interest, self.H)
        self.last_reward = reward
        total = sum(self.cost(s, r) for s, r in zip(self.starts, routes))
        return reward - 1e-4 * total

    # --- construction ---

    def greedy_insertion(self) -> list[list[int]]:
        routes: list[list[int]] = [[] for _ in self.starts]
        costs = [0] * len(routes)
        pool = np.array([t for t in self.targets], dtype=np.int64)
        D = self.D
        while len(pool):
            best = None
            for ri, (s, route) in enumerate(zip(self.starts, routes)):
                seq = np.array([s] + route, dtype=np.int64)
                # inserting after seq[p]: D[seq[p],u] + D[u,seq[p+1]] - D[seq[p],seq[p+1]]
                add = D[np.ix_(seq, pool)].astype(np.float64)
                if len(seq) > 1:
                    nxt = seq[1:]
                    add[:-1] += D[np.ix_(nxt, pool)] - D[seq[:-1], nxt][:, None]
                feasible = costs[ri] + add <= self.H
                if not feasible.any():
                    continue
                add = np.where(feasible, add, np.inf)
                p, u = np.unravel_index(np.argmin(add), add.shape)
                cand = (add[p, u], ri, int(p), int(u))
                if best is None or cand[0] < best[0]:
                    best = cand
            if best is None:
                break
            c, ri, p, u = best
            routes[ri].insert(p, int(pool[u]))
            costs[ri] += int(c)
            pool = np.delete(pool, u)
        return routes

    # --- neighborhood ---

    def best_position(self, start: int, route: list[int], u: int) -> int:
        seq = [start] + route
        D = self.D
        best_p, best_c = len(route), D[seq[-1], u]
        for p in range(len(route)):
            c = D[seq[p], u] + D[u, seq[p + 1]] - D[seq[p], seq[p + 1]]
            if c < best_c:
                best_p, best_c = p, c
        return best_p

    def neighbor(self, routes: list[list[int]]) -> list[list[int]] | None:
        rng = self.rng
        new = [list(r) for r in routes]
        routed = {t for r in routes for t in r}
        pool = [t for t in self.targets if t not in routed]
        nonempty = [i for i, r in enumerate(new) if r]
        move = int(rng.integers(7))
        if move == 0 and pool:  # insert
            u = pool[int(rng.integers(len(pool)))]
            ri = int(rng.integers(len(new)))
            new[ri].insert(self.best_position(self.starts[ri], new[ri], u), u)
        elif move == 1 and nonempty:  # remove
            ri = nonempty[int(rng.integers(len(nonempty)))]
            new[ri].pop(int(rng.integers(len(new[ri]))))
        elif move == 2 and nonempty and pool:  # swap with unrouted
            ri = nonempty[int(rng.integers(len(nonempty)))]
            new[ri][int(rng.integers(len(new[ri])))] = pool[int(rng.integers(len(pool)))]
        elif move == 3 and nonempty and len(new) > 1:  # relocate to another route
            ri = nonempty[int(rng.integers(len(nonempty)))]
            u = new[ri].pop(int(rng.integers(len(new[ri]))))
            rj = int(rng.integers(len(new) - 1))
            rj += rj >= ri
            new[rj].insert(self.best_position(self.starts[rj], new[rj], u), u)
        elif move == 4 and nonempty:  # 2-opt
            ri = nonempty[int(rng.integers(len(nonempty)))]
            r = new[ri]
            if len(r) < 2:
                return None
            i, j = sorted(rng.choice(len(r) + 1, size=2, replace=False))
            r[i:j] = r[i:j][::-1]
        elif move == 5 and nonempty:  # or-opt
            ri = nonempty[int(rng.integers(len(nonempty)))]
            r = new[ri]
            if len(r) < 2:
                return None
            seg = int(rng.integers(1, min(3, len(r) - 1) + 1))
            i = int(rng.integers(len(r) - seg + 1))
            chunk = r[i : i + seg]
            del r[i : i + seg]
            j = int(rng.integers(len(r) + 1))
            r[j:j] = chunk
        elif move == 6 and len(nonempty) >= 1 and len(new) > 1:  # exchange across routes
            ri, rj = rng.choice(len(new), size=2, replace=False)
            if not new[ri] or not new[rj]:
                return None
            a, b = int(rng.integers(len(new[ri]))), int(rng.integers(len(new[rj])))
            new[ri][a], new[rj][b] = new[rj][b], new[ri][a]
        else:
            return None
        return new

    def anneal(self, routes, max_moves: int, time_limit: float | None, final_ratio: float):
        cur, cur_s = routes, self.score(routes)
        best, best_s = cur, cur_s
        # no plan can collect more than this, so reaching it ends the search
        bound = min(len(self.targets), len(self.starts) * self.H)
        if not self.targets or max_moves <= 0 or self.last_reward >= bound:
            return best, best_s
        # start temperature: mean worsening accepted with probability 1/2
        worse = []
        for _ in range(30):
            cand = self.neighbor(cur)
            if cand is not None:
                d = cur_s - self.score(cand)
                if d > 0:
                    worse.append(d)
        t0 = (float(np.mean(worse)) if worse else 1.0) / math.log(2.0)
        alpha = final_ratio ** (1.0 / max_moves)
        temp = t0
        deadline = None if time_limit is None else time.perf_counter() + time_limit
        for it in range(max_moves):
            if deadline is not None and (it & 63) == 0 and time.perf_counter() > deadline:
                break
            temp *= alpha
            cand = self.neighbor(cur)
            if cand is None:
                continue
            s = self.score(cand)
            if s >= cur_s or self.rng.random() < math.exp((s - cur_s) / temp):
                cur, cur_s = cand, s
                if s > best_s:
                    best, best_s = cand, s
                    if self.last_reward >= bound:
                        break
        return best, best_s


def vrp_expert(
    state: WorldState,
    horizon: int | None = None,
    config: ExpertConfig = ExpertConfig(),
    seed: int = 0,
    full_map: bool = True,
) -> RoutePlan:
    """Team plan over ``horizon`` steps approximately maximizing interest waypoints visited.

    With ``full_map=False`` in exploration mode the planner only sees explored
    waypoints and the interest flags among them.
    """
    horizon = state.remaining if horizon is None else int(horizon)
    graph = state.graph
    if full_map or state.mode != EXPLORATION:
        allowed = np.ones(graph.n, dtype=bool)
        dist = graph.hop_matrix
    else:
        allowed = state.explored
        dist = hop_matrix(graph, allowed)
    starts = [int(p) for p in state.robot_at]
    interest = state.interest & allowed
    reach = (dist[starts] >= 0) & (dist[starts] <= horizon)
    targets = np.flatnonzero(interest & reach.any(axis=0)).tolist()
    if horizon <= 0 or not targets:
        return RoutePlan([[s] for s in starts], max(horizon, 0), 0)
    planner = _Planner(graph.neighbors, dist, allowed, starts, targets, horizon, np.random.default_rng(seed))
    routes = planner.greedy_insertion()
    routes, _ = planner.anneal(routes, config.max_moves, config.time_limit, config.final_temperature_ratio)
    paths = planner.expand(routes)
    return RoutePlan(paths, horizon, simulate_paths(paths, planner.interest, horizon))


class OpenLoopExpert:
    """Plans once at reset for the remaining horizon, then follows the routes."""

    name = "expert-openloop"

    def __init__(self, config: ExpertConfig = ExpertConfig(), seed: int = 0):
        self.config = config
        self.seed = seed
        self.plan: RoutePlan | None = None
        self.ptr: list[int] = []

    def reset(self, state: WorldState) -> None:
        self.plan = vrp_expert(state, state.remaining, self.config, self.seed, full_map=True)
        self.ptr = [0] * state.n_robots

    def __call__(self, state: WorldState) -> list[int]:
        if self.plan is None:
            self.reset(state)
        out = []
        for i, path in enumerate(self.plan.paths):
            k = self.ptr[i]
            if k + 1 < len(path) and state.robot_at[i] == path[k + 1]:
                k = self.ptr[i] = k + 1
            out.append(path[k + 1] if k + 1 < len(path) else STAY)
        return out


class RecedingHorizonExpert:
    """Replans over the known graph every step and executes only the first move."""

    name = "expert-rh"

    def __init__(self, config: ExpertConfig = ExpertConfig(), seed: int = 0, plan_horizon: int | None = None):
        self.config = config
        self.seed = seed
        self.plan_horizon = config.plan_horizon if plan_horizon is None else plan_horizon

    def __call__(self, state: WorldState) -> list[int]:
        h = min(self.plan_horizon, state.remaining)
        cfg = replace(self.config, max_moves=self.config.replan_moves)
        plan = vrp_expert(state, h, cfg, self.seed + 7919 * state.timestep, full_map=False)
        return [p[1] if len(p) > 1 else STAY for p in plan.paths]


def receding_horizon(state: WorldState, plan_horizon: int, config: ExpertConfig = ExpertConfig(), seed: int = 0) -> list[int]:
    return RecedingHorizonExpert(config, seed, plan_horizon)(state)


class GreedyController:
    """Each robot heads for its nearest known interest waypoint within ``k`` hops."""

    name = "greedy"

    def __init__(self, k: int | None = None):
        self.k = k

    def __call__(self, state: WorldState) -> list[int]:
        nbrs = state.graph.neighbors
        known = state.known()
        interest = state.interest
        out = []
        for p in state.robot_at:
            p = int(p)
            dist = bfs_hops(nbrs, p, self.k, known)
            best = None
            for w, d in dist.items():
                if d > 0 and interest[w] and (best is None or (d, w) < best):
                    best = (d, w)
            if best is None:
                out.append(STAY)
                continue
            d, target = best
            back = bfs_hops(nbrs, target, d, known)
            out.append(min(n for n in nbrs[p] if dist.get(n) == 1 and back.get(n) == d - 1))
        return out


def greedy_controller(state: WorldState, k: int | None = None) -> list[int]:
    return GreedyController(k)(state)


def brute_force_oracle(state: WorldState, horizon: int | None = None) -> tuple[int, list[list[int]]]:
    """Exhaustive optimum of the episode under exact step semantics (memoized DFS)."""
    horizon = state.remaining if horizon is None else int(horizon)
    nbrs = state.graph.neighbors
    max_deg = max(len(nb) for nb in nbrs)
    if (max_deg + 1) ** (state.n_robots * horizon) > ORACLE_LIMIT:
        raise SearchSpaceError("joint action space too large for exhaustive search")
    interest0 = frozenset(np.flatnonzero(state.interest).tolist())
    memo: dict = {}

    def solve(t: int, pos: tuple[int, ...], left: frozenset) -> int:
        if t == horizon or not left:
            return 0
        key = (t, pos, left)
        hit = memo.get(key)
        if hit is not None:
            return hit[0]
        best = (-1, None)
        options = [[STAY] + list(nbrs[p]) for p in pos]
        for joint in itertools.product(*options):
            fin = tuple(resolve_moves(pos, joint))
            got = left.intersection(fin)
            val = len(got) + solve(t + 1, fin, left - got)
            if val > best[0]:
                best = (val, list(joint))
        memo[key] = best
        return best[0]

    pos = tuple(int(p) for p in state.robot_at)
    total = solve(0, pos, interest0)
    actions = []
    left = interest0
    for t in range(horizon):
        if not left:
            break
        joint = memo[(t, pos, left)][1]
        actions.append(joint)
        pos = tuple(resolve_moves(pos, joint))
        left = left - set(pos)
    return total, actions


class OracleController:
    """Replays the exhaustive optimum computed at reset (tiny instances only)."""

    name = "oracle"

    def __init__(self):
        self.actions: list[list[int]] = []

    def reset(self, state: WorldState) -> None:
        _, self.actions = brute_force_oracle(state)
        self.start = state.timestep

    def __call__(self, state: WorldState) -> list[int]:
        t = state.timestep - self.start
        return list(self.actions[t]) if t < len(self.actions) else [STAY] * state.n_robots
