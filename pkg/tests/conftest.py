import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings, strategies as st

from covgnn.env import COVERAGE, EXPLORATION, reset
from covgnn.gnn import NONLINEAR, ArchConfig, init_params
from covgnn.spatial_graph import Disc, ObstacleMap, Rect, build_lattice, sample_submap

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")


def grid_graph(nx_: int, ny_: int, spacing: float = 5.0):
    """Obstacle-free lattice with ``nx_`` x ``ny_`` waypoints."""
    return build_lattice(ObstacleMap(Rect(0, 0, spacing * (nx_ - 1) or 1e-3, spacing * (ny_ - 1) or 1e-3)), spacing)


def path_graph(n: int, spacing: float = 5.0):
    return build_lattice(ObstacleMap(Rect(0, 0, spacing * (n - 1), 1e-3)), spacing)


@st.composite
def obstacle_maps(draw, max_cells: int = 9):
    """Small random maps: bounds on the lattice, a few rectangles and discs anywhere inside."""
    spacing = draw(st.sampled_from([1.0, 2.5, 5.0]))
    w = spacing * draw(st.integers(1, max_cells))
    h = spacing * draw(st.integers(1, max_cells))
    obs = []
    for _ in range(draw(st.integers(0, 4))):
        x0 = draw(st.floats(0, w, allow_nan=False))
        y0 = draw(st.floats(0, h, allow_nan=False))
        x1 = draw(st.floats(x0, w, allow_nan=False))
        y1 = draw(st.floats(y0, h, allow_nan=False))
        obs.append(Rect(x0, y0, x1, y1))
    for _ in range(draw(st.integers(0, 3))):
        r = draw(st.floats(0.1, max(0.1, min(w, h) / 2), allow_nan=False))
        cx = draw(st.floats(r, max(r, w - r), allow_nan=False))
        cy = draw(st.floats(r, max(r, h - r), allow_nan=False))
        if cx + r <= w and cy + r <= h:
            obs.append(Disc(cx, cy, r))
    return ObstacleMap(Rect(0, 0, w, h), tuple(obs)), spacing


@st.composite
def lattices(draw, max_cells: int = 9, min_nodes: int = 1):
    from covgnn.spatial_graph import EmptyMapError

    om, spacing = draw(obstacle_maps(max_cells))
    try:
        g = build_lattice(om, spacing)
    except EmptyMapError:
        g = grid_graph(2, 2, spacing)
    if g.n < min_nodes:
        g = grid_graph(max(2, min_nodes), 1, spacing)
    return g


@st.composite
def world_states(draw, max_cells: int = 7, max_robots: int = 4, modes=(COVERAGE, EXPLORATION)):
    g = draw(lattices(max_cells, min_nodes=2))
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n_robots = draw(st.integers(1, min(max_robots, g.n)))
    frac = draw(st.sampled_from([0.3, 0.6, 1.0]))
    mode = draw(st.sampled_from(modes))
    horizon = draw(st.integers(1, 12))
    return reset(g, n_robots, frac, mode, None, horizon, rng)


def random_state(rng, n_wp=40, n_robots=2, mode=COVERAGE, horizon=10, base=None):
    base = base if base is not None else grid_graph(9, 9)
    g = sample_submap(base, min(n_wp, base.n), rng)
    return reset(g, min(n_robots, g.n), 1.0, mode, None, horizon, rng)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- policy helpers ----------------------------------------------------------


def params_for(variant=NONLINEAR, k=2, node_dim=3, seed=0, bias_seed=None):
    p = init_params(ArchConfig(variant=variant, k=k, node_dim=node_dim), np.random.default_rng(seed))
    # random biases so no unit is trivially dead at init
    rng = np.random.default_rng(seed + 1 if bias_seed is None else bias_seed)
    for t in p.named_tensors().values():
        if t.value.ndim == 1:
            t.value = rng.normal(scale=0.3, size=t.shape)
    return p


def hops_from(sig, node):
    adj = [[] for _ in range(sig.n_nodes)]
    for s, r in zip(sig.senders, sig.receivers):
        adj[s].append(r)
        adj[r].append(s)
    dist = {node: 0}
    frontier = [node]
    while frontier:
        nxt = []
        for u in frontier:
            for v in adj[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    return np.array([dist.get(i, 10**9) for i in range(sig.n_nodes)])


def permute_signal(sig, node_perm, edge_perm):
    """node_perm[old] = new id; edges reordered so new edge j is old edge edge_perm[j]."""
    inv_edge = np.argsort(edge_perm)
    feats = np.zeros_like(sig.node_features)
    feats[node_perm] = sig.node_features
    wp = np.zeros_like(sig.node_waypoint)
    wp[node_perm] = sig.node_waypoint
    ids = np.where(sig.action_mask, inv_edge[np.where(sig.action_mask, sig.action_edge_ids, 0)], -1)
    return dataclasses.replace(
        sig,
        node_features=feats,
        edge_features=sig.edge_features[edge_perm],
        senders=node_perm[sig.senders[edge_perm]],
        receivers=node_perm[sig.receivers[edge_perm]],
        robot_node_ids=node_perm[sig.robot_node_ids],
        action_edge_ids=ids,
        node_waypoint=wp,
    )


# --- acceptance report -------------------------------------------------------

_criteria: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        # parametrized criteria: worst status wins, details accumulate
        if n in _criteria:
            prev, _, prev_detail = _criteria[n]
            status = max(prev, status, key=["PASS", "SKIP", "FAIL"].index)
            detail = "; ".join(d for d in (prev_detail, detail) if d)
        _criteria[n] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, title, detail = _criteria[n]
        line = f"criterion {n:2d} {status}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
