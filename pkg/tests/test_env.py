import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covgnn.baselines import brute_force_oracle
from covgnn.env import (
    COVERAGE,
    EXPLORATION,
    STAY,
    GraphSignal,
    IllegalActionError,
    WorldState,
    batch_signals,
    observe,
    reset,
    resolve_moves,
    rollout,
    step,
)

from conftest import grid_graph, path_graph, world_states
from oracles import collision_rule_holds, exhaustive_best


def make_state(graph, robots, interest=None, mode=COVERAGE, horizon=10, sensor_range=None):
    interest = np.zeros(graph.n, dtype=bool) if interest is None else np.asarray(interest, dtype=bool)
    state = reset(graph, len(robots), 1.0, mode, sensor_range, horizon, np.random.default_rng(0))
    state.robot_at = np.array(robots, dtype=np.int64)
    state.interest = interest.copy()
    if mode == EXPLORATION:
        from covgnn.env import sense

        state.explored = sense(graph, robots, state.sensor_range)
    return state


def random_actions(state, rng):
    out = []
    for p in state.robot_at:
        opts = [STAY, *state.graph.neighbors[p]]
        out.append(int(opts[rng.integers(len(opts))]))
    return out


class TestReset:
    def test_single_node_has_no_interest(self, rng):
        s = reset(grid_graph(1, 1), 1, 1.0, rng=rng)
        assert not s.interest.any()
        total, _ = rollout(s, lambda st: [STAY])
        assert total == 0

    def test_exploration_center_of_3x3_sees_everything(self):
        g = grid_graph(3, 3)
        s = make_state(g, [4], mode=EXPLORATION)
        assert s.sensor_range == 10.0
        assert s.explored.all()

    def test_exploration_corner_sees_within_two_spacings(self):
        g = grid_graph(4, 4)
        s = make_state(g, [0], mode=EXPLORATION)
        expect = np.hypot(*(g.positions - g.positions[0]).T) <= 10.0
        np.testing.assert_array_equal(s.explored, expect)

    @given(st.integers(1, 8), st.integers(0, 1000), st.sampled_from([0.25, 0.5, 1.0]))
    def test_distinct_robots_and_interest_excludes_starts(self, n_robots, seed, frac):
        g = grid_graph(4, 3)
        s = reset(g, n_robots, frac, rng=np.random.default_rng(seed))
        assert len(set(s.robot_at.tolist())) == n_robots
        assert not s.interest[s.robot_at].any()
        assert s.interest.sum() == round(frac * (g.n - n_robots))
        assert s.timestep == 0

    def test_rejects_bad_arguments(self, rng):
        g = grid_graph(2, 1)
        with pytest.raises(ValueError):
            reset(g, 3, rng=rng)
        with pytest.raises(ValueError):
            reset(g, 1, 0.0, rng=rng)
        with pytest.raises(ValueError):
            reset(g, 1, mode="flying", rng=rng)


class TestStep:
    def test_move_onto_interest(self):
        g = path_graph(3)
        s = make_state(g, [0], [False, True, True])
        s2, r = step(s, [1])
        assert r == 1 and not s2.interest[1] and s2.interest[2]
        assert s.interest[1], "step must not mutate its input"

    def test_same_target_smaller_index_wins(self):
        g = path_graph(3)
        s = make_state(g, [0, 2], [False, True, False])
        s2, r = step(s, [1, 1])
        assert s2.robot_at.tolist() == [1, 2]
        assert r == 1

    def test_revisit_gives_nothing(self):
        g = path_graph(3)
        s = make_state(g, [0], [False, True, False])
        s, r1 = step(s, [1])
        s, r2 = step(s, [0])
        s, r3 = step(s, [1])
        assert (r1, r2, r3) == (1, 0, 0)

    def test_move_into_held_position_blocked(self):
        g = path_graph(3)
        s = make_state(g, [0, 1])
        s2, _ = step(s, [1, STAY])
        assert s2.robot_at.tolist() == [0, 1]

    def test_follow_vacated_spot(self):
        # robot 1 moves into the waypoint robot 0 just left
        g = path_graph(3)
        s = make_state(g, [1, 0])
        s2, _ = step(s, [2, 1])
        assert s2.robot_at.tolist() == [2, 1]

    def test_blocked_chain_propagates(self):
        # robot 2 holds; robot 1 cannot enter its spot so it holds too; robot 0 is then blocked
        g = path_graph(4)
        s = make_state(g, [0, 1, 2])
        s2, _ = step(s, [1, 2, STAY])
        assert s2.robot_at.tolist() == [0, 1, 2]

    def test_illegal_moves(self):
        g = path_graph(3)
        s = make_state(g, [0])
        with pytest.raises(IllegalActionError):
            step(s, [2])
        with pytest.raises(IllegalActionError):
            step(s, [1, 1])
        s.timestep = s.horizon
        with pytest.raises(ValueError):
            step(s, [1])

    @settings(max_examples=300)
    @given(st.lists(st.integers(0, 5), min_size=1, max_size=5, unique=True), st.data())
    def test_resolution_obeys_priority_rule(self, positions, data):
        targets = [data.draw(st.sampled_from([STAY, *range(6)])) for _ in positions]
        final = resolve_moves(positions, targets)
        assert collision_rule_holds(positions, targets, final, STAY)

    @settings(max_examples=40)
    @given(world_states(), st.integers(0, 2**32 - 1))
    def test_random_episode_invariants(self, state, seed):
        rng = np.random.default_rng(seed)
        total = 0
        start_interest = int(state.interest.sum())
        while state.timestep < state.horizon:
            before = state.copy()
            action = random_actions(state, rng)
            state, r = step(state, action)
            flipped = before.interest & ~state.interest
            assert r == flipped.sum()
            assert not (~before.interest & state.interest).any()
            assert len(set(state.robot_at.tolist())) == state.n_robots
            assert set(np.flatnonzero(flipped)) <= set(state.robot_at.tolist())
            assert (state.explored >= before.explored).all()
            assert state.explored[state.robot_at].all()
            total += r
        assert total <= min(start_interest, state.n_robots * state.horizon)


class TestObserve:
    def test_two_waypoint_path(self):
        g = path_graph(2)
        sig = observe(make_state(g, [0], [False, True]))
        assert sig.n_nodes == 3 and sig.n_edges == 4
        pairs = set(zip(sig.senders.tolist(), sig.receivers.tolist()))
        assert pairs == {(0, 1), (1, 0), (2, 1), (1, 2)}
        np.testing.assert_array_equal(sig.node_features[2], [1, 0, 0])
        np.testing.assert_array_equal(sig.node_features[1], [0, 1, 1])
        np.testing.assert_array_equal(sig.node_features[0], [0, 1, 0])
        assert sig.action_targets[0].tolist() == [1, -1, -1, -1]

    def test_frontier_bit(self):
        g = path_graph(6)
        sig = observe(make_state(g, [0], mode=EXPLORATION))
        # sensor reaches 0..2; waypoint 2 borders hidden waypoint 3
        assert sig.node_features.shape == (4, 4)
        assert sig.node_features[:3, 3].tolist() == [0, 0, 1]
        np.testing.assert_array_equal(sig.node_features[3], [1, 0, 0, 0])

    def test_action_edges_point_from_candidate_to_robot(self):
        g = grid_graph(3, 3)
        sig = observe(make_state(g, [4]))
        ids = sig.action_edge_ids[0]
        assert sig.action_mask[0].all()
        assert sig.receivers[ids].tolist() == [sig.robot_node_ids[0]] * 4
        assert sig.node_waypoint[sig.senders[ids]].tolist() == [1, 3, 5, 7]

    def test_no_candidates_when_isolated(self):
        sig = observe(make_state(grid_graph(1, 1), [0]))
        assert not sig.action_mask.any()

    @settings(max_examples=60)
    @given(world_states())
    def test_signal_invariants(self, state):
        sig = observe(state)
        g = state.graph
        n_wp = sig.n_nodes - state.n_robots
        pairs = list(zip(sig.senders.tolist(), sig.receivers.tolist()))
        assert sorted(pairs) == sorted((r, s) for s, r in pairs)
        assert len(set(pairs)) == len(pairs)
        # node types are exclusive and features binary
        f = sig.node_features
        assert set(np.unique(f)) <= {0.0, 1.0}
        assert (f[:, 0] + f[:, 1] == 1).all()
        assert (f[n_wp:, 0] == 1).all()
        # positions: robot nodes sit on their waypoint
        pos = np.vstack([g.positions[sig.node_waypoint[:n_wp]], g.positions[state.robot_at]])
        d = np.hypot(*(pos[sig.senders] - pos[sig.receivers]).T)
        np.testing.assert_allclose(sig.edge_features, d)
        np.testing.assert_allclose(sig.edge_features, g.spacing)
        known = state.known()
        for i, w in enumerate(state.robot_at):
            cands = [v for v in g.neighbors[w] if known[v]]
            slots = sig.action_targets[i][sig.action_mask[i]].tolist()
            assert slots == sorted(cands)[:4]
            ids = sig.action_edge_ids[i][sig.action_mask[i]]
            assert (sig.receivers[ids] == sig.robot_node_ids[i]).all()
            assert sig.node_waypoint[sig.senders[ids]].tolist() == slots
        if state.mode == EXPLORATION:
            wps = sig.node_waypoint[:n_wp]
            assert state.explored[wps].all() and len(wps) == state.explored.sum()
            for node, w in enumerate(wps):
                hidden = any(not state.explored[v] for v in g.neighbors[w])
                assert f[node, 3] == float(hidden)
        assert observe(state).equals(sig)

    @given(world_states())
    def test_dict_round_trip(self, state):
        sig = observe(state)
        assert GraphSignal.from_dict(sig.to_dict()).equals(sig)

    def test_batch_is_disjoint_union(self, rng):
        a = observe(make_state(grid_graph(2, 2), [0]))
        b = observe(make_state(path_graph(3, spacing=2.0), [1, 2]))
        big = batch_signals([a, b])
        assert big.n_nodes == a.n_nodes + b.n_nodes
        assert big.n_robots == 3
        np.testing.assert_allclose(big.edge_features, 1.0)
        assert big.action_edge_ids[1:][big.action_mask[1:]].min() >= a.n_edges
        assert (big.senders[a.n_edges :] >= a.n_nodes).all()


class TestRollout:
    def test_zero_horizon(self, rng):
        s = reset(grid_graph(3, 3), 1, rng=rng)
        total, traj = rollout(s, lambda st: [STAY], horizon=0)
        assert total == 0 and traj.rewards == []

    def test_stay_forever(self, rng):
        s = reset(grid_graph(3, 3), 2, rng=rng, horizon=5)
        total, traj = rollout(s, lambda st: [STAY, STAY])
        assert total == 0 and len(traj.actions) == 5

    def test_optimal_on_path(self):
        s = make_state(path_graph(4), [0], [False, True, True, True], horizon=3)
        best, plan = brute_force_oracle(s)
        assert best == 3
        it = iter(plan)
        total, _ = rollout(s, lambda st: next(it))
        assert total == 3
        assert exhaustive_best(s.graph, [0], s.interest, 3, resolve_moves, STAY) == 3

    def test_controller_reset_hook(self, rng):
        calls = []

        class Probe:
            def reset(self, st):
                calls.append(st.timestep)

            def __call__(self, st):
                return [STAY]

        rollout(reset(grid_graph(2, 2), 1, rng=rng, horizon=2), Probe())
        assert calls == [0]


@settings(max_examples=40)
@given(world_states(modes=(COVERAGE,)), st.integers(0, 2**32 - 1))
def test_coverage_is_exploration_with_unbounded_sensor(state, seed):
    rng = np.random.default_rng(seed)
    explore = WorldState(
        state.graph, state.robot_at.copy(), state.interest.copy(),
        np.ones(state.graph.n, dtype=bool), 0, state.horizon, EXPLORATION, 1e9,
    )
    cov = state
    while cov.timestep < cov.horizon:
        a, b = observe(cov), observe(explore)
        np.testing.assert_array_equal(a.node_features, b.node_features[:, :3])
        assert not b.node_features[:, 3].any()
        np.testing.assert_array_equal(a.senders, b.senders)
        np.testing.assert_array_equal(a.action_edge_ids, b.action_edge_ids)
        action = random_actions(cov, rng)
        cov, r1 = step(cov, action)
        explore, r2 = step(explore, action)
        assert r1 == r2
