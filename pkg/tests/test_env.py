import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from ffagents import env as envmod
from ffagents.env import Action, EnvParams, Orientation, make_state
from ffagents.errors import ConfigError, ContractViolation
from ffagents.ffm import EMPTY, FIRE, RESOURCE, TREE, FfmParams, Lattice

STILL = FfmParams(0.0, 0.0, 0.0)


def params(L=5, N=1, **kw):
    kw.setdefault("ffm", STILL)
    kw.setdefault("obs_window", 3)
    return EnvParams(grid_size=L, agents=N, **kw)


@pytest.mark.parametrize("kw", [
    {"agents": 26}, {"obs_window": 4}, {"obs_window": 11}, {"reward_resource": -1.0},
    {"reward_fire": 1.0}, {"reward_resource": 10.0}, {"episode_steps": 0}, {"p_init": 2.0},
])
def test_params_validation(kw):
    base = {"grid_size": 5, "agents": 3, "obs_window": 3}
    base.update(kw)
    with pytest.raises(ConfigError):
        EnvParams(**base)


def test_orientation_turns():
    assert Orientation.NORTH.turned_left() == Orientation.WEST
    assert Orientation.WEST.turned_right() == Orientation.NORTH
    assert [tuple(d) for d in envmod.DIRECTIONS] == [(-1, 0), (0, 1), (1, 0), (0, -1)]


def test_reset_places_distinct_agents_and_binomial_trees():
    p = EnvParams(grid_size=40, agents=200, p_init=0.5, ffm=STILL)
    state = envmod.reset(p, np.random.default_rng(0))
    state.check()
    n = 1600
    trees = state.lattice.counts()["trees"]
    assert abs(trees - n / 2) < 5 * np.sqrt(n / 4)
    assert state.lattice.counts()["fires"] == 0 and state.lattice.counts()["resources"] == 0


def test_make_state_rejects_overlap():
    with pytest.raises(ContractViolation):
        make_state(params(N=2), Lattice.filled(5), [(1, 1), (1, 1)], [0, 0])


def test_forward_move_wraps():
    state = make_state(params(), Lattice.filled(5), [(0, 2)], [Orientation.NORTH])
    envmod.apply_actions(state, [Action.FORWARD], np.random.default_rng(0))
    assert tuple(state.positions[0]) == (4, 2)
    assert state.occupancy[4, 2] == 0 and state.occupancy[0, 2] == -1


def test_turns_do_not_move():
    state = make_state(params(), Lattice.filled(5), [(2, 2)], [Orientation.EAST])
    envmod.apply_actions(state, [Action.TURN_LEFT], np.random.default_rng(0))
    assert state.orientations[0] == Orientation.NORTH and tuple(state.positions[0]) == (2, 2)
    envmod.apply_actions(state, [Action.TURN_RIGHT], np.random.default_rng(0))
    envmod.apply_actions(state, [Action.TURN_RIGHT], np.random.default_rng(0))
    assert state.orientations[0] == Orientation.SOUTH


def test_blocked_by_agent():
    state = make_state(params(N=2), Lattice.filled(5), [(2, 2), (2, 3)], [Orientation.EAST, Orientation.NORTH])
    _, _, ev = envmod.apply_actions(state, [Action.FORWARD, Action.TURN_LEFT], np.random.default_rng(0))
    assert ev.blocked[0] and tuple(state.positions[0]) == (2, 2)


def test_contested_cell_goes_to_exactly_one_agent():
    winners = set()
    for seed in range(30):
        state = make_state(params(N=2), Lattice.filled(5), [(2, 1), (2, 3)], [Orientation.EAST, Orientation.WEST])
        _, _, ev = envmod.apply_actions(state, [Action.FORWARD, Action.FORWARD], np.random.default_rng(seed))
        assert state.occupancy[2, 2] in (0, 1)
        assert ev.blocked.sum() == 1
        winners.add(int(state.occupancy[2, 2]))
    assert winners == {0, 1}


def test_harvest_cuts_front_tree_only():
    lat = Lattice.from_text(".....\n.....\n..TT.\n.....\n.....\n")
    state = make_state(params(), lat, [(2, 2)], [Orientation.EAST])
    _, r, ev = envmod.apply_actions(state, [Action.HARVEST], np.random.default_rng(0))
    assert ev.harvested[0] and state.lattice.cells[2, 3] == EMPTY and state.lattice.cells[2, 2] == TREE
    assert r[0] == 0.0
    _, _, ev = envmod.apply_actions(state, [Action.HARVEST], np.random.default_rng(0))
    assert ev.harvest_noop[0]


def test_entering_resource_pays_and_leaves_tree():
    lat = Lattice.from_text(".....\n.....\n...R.\n.....\n.....\n")
    state = make_state(params(reward_resource=1.0), lat, [(2, 2)], [Orientation.EAST])
    _, r, ev = envmod.apply_actions(state, [Action.FORWARD], np.random.default_rng(0))
    assert r[0] == 1.0 and ev.consumed[0]
    assert state.lattice.cells[2, 3] == TREE


def test_fire_penalty_applies_after_ca_step():
    # agent on a tree next to a fire: the tree ignites during the CA phase
    lat = Lattice.from_text(".....\n.....\n..TF.\n.....\n.....\n")
    state = make_state(params(), lat, [(2, 2)], [Orientation.NORTH])
    _, r, ev = envmod.apply_actions(state, [Action.TURN_LEFT], np.random.default_rng(0))
    assert r[0] == -10.0 and ev.burned[0]
    # agent on a burning cell at the start: fire has burned out after the step
    lat = Lattice.from_text(".....\n.....\n..F..\n.....\n.....\n")
    state = make_state(params(), lat, [(2, 2)], [Orientation.NORTH])
    _, r, _ = envmod.apply_actions(state, [Action.TURN_LEFT], np.random.default_rng(0))
    assert r[0] == 0.0


def test_step_contracts():
    state = make_state(params(episode_steps=1), Lattice.filled(5), [(0, 0)], [0])
    with pytest.raises(ContractViolation):
        envmod.apply_actions(state, [0, 0], np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        envmod.apply_actions(state, [4], np.random.default_rng(0))
    envmod.apply_actions(state, [0], np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        envmod.apply_actions(state, [0], np.random.default_rng(0))


def test_east_agent_sees_unrotated_window():
    rng = np.random.default_rng(4)
    lat = Lattice(rng.integers(0, 4, size=(9, 9)))
    state = make_state(params(L=9, obs_window=5), lat, [(4, 4)], [Orientation.EAST])
    obs = envmod.observe(state, 0)
    assert np.array_equal(obs[0], ((lat.cells == TREE) | (lat.cells == RESOURCE))[2:7, 2:7])
    assert obs[3, 2, 2] == 1  # the agent sees itself at the centre


def test_front_cell_is_right_of_centre():
    lat = Lattice.from_text(".....\n..T..\n.....\n.....\n.....\n")
    state = make_state(params(), lat, [(2, 2)], [Orientation.NORTH])
    obs = envmod.observe(state, 0)
    assert obs[0, 1, 2] == 1 and obs[0].sum() == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(3, 9), st.sampled_from([1, 3, 5, 7]), st.integers(1, 6))
def test_observation_matches_rotation_oracle(seed, L, w, N):
    if w > 2 * L - 1 or N > L * L:
        return
    rng = np.random.default_rng(seed)
    p = params(L=L, N=N, obs_window=w)
    lat = Lattice(rng.integers(0, 4, size=(L, L)))
    flat = rng.choice(L * L, size=N, replace=False)
    pos = np.stack([flat // L, flat % L], axis=1)
    ori = rng.integers(0, 4, size=N)
    state = make_state(p, lat, pos, ori)
    obs = envmod.observe_all(state)
    occupied = (state.occupancy >= 0).tolist()
    for a in range(N):
        want = oracles.egocentric_window(lat.cells.tolist(), occupied, pos[a, 0], pos[a, 1], int(ori[a]), w)
        assert np.array_equal(obs[a], want)
        assert np.array_equal(envmod.observe(state, a), want)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_rotation_consistency(seed):
    # turning left then observing equals rotating the old view by 90 degrees
    rng = np.random.default_rng(seed)
    lat = Lattice(rng.integers(0, 4, size=(7, 7)))
    state = make_state(params(L=7, obs_window=5), lat, [(3, 3)], [int(rng.integers(4))])
    before = envmod.observe(state, 0)
    state.orientations[0] = (state.orientations[0] - 1) % 4
    after = envmod.observe(state, 0)
    # new front is the old left (up), so the old view turns clockwise
    assert np.array_equal(after, np.rot90(before, k=-1, axes=(1, 2)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.lists(st.integers(0, 3), min_size=6, max_size=6))
def test_step_preserves_state_invariants(seed, actions):
    p = EnvParams(grid_size=4, agents=6, obs_window=3, ffm=FfmParams(0.2, 0.1, 0.1))
    state = envmod.reset(p, np.random.default_rng(seed))
    for t in range(5):
        state, r, ev = envmod.apply_actions(state, actions, np.random.default_rng(seed + t))
        state.check()
        assert set(np.unique(r)) <= {0.0, 1.0, -10.0, -9.0}
        assert np.array_equal(ev.burned, state.lattice.cells[state.positions[:, 0], state.positions[:, 1]] == FIRE)


def test_run_episode_reproducible_and_logs():
    p = EnvParams(grid_size=6, agents=4, episode_steps=20, obs_window=3, ffm=FfmParams(0.1, 0.02, 0.05))

    def policy(obs):
        return np.zeros(len(obs), dtype=int) + (obs[:, 0, 1, 2] > 0) * Action.HARVEST

    a = envmod.run_episode(p, policy, np.random.default_rng(1))
    b = envmod.run_episode(p, [lambda o: int(policy(o[None])[0])] * 4, np.random.default_rng(1))
    assert np.array_equal(a.rewards, b.rewards) and np.array_equal(a.trees, b.trees)
    assert a.steps_done == 20 and a.mean_obs.shape == (4, 3, 3)


def test_run_episode_wraps_policy_errors():
    p = EnvParams(grid_size=4, agents=1, episode_steps=3, obs_window=3)

    def bad(obs):
        raise KeyError("boom")

    with pytest.raises(RuntimeError, match="step 0"):
        envmod.run_episode(p, bad, np.random.default_rng(0))


def test_replay_round_trip(tmp_path):
    p = EnvParams(grid_size=5, agents=2, episode_steps=4, obs_window=3)
    rng = np.random.default_rng(3)
    state = envmod.reset(p, rng)
    rec = envmod.ReplayRecorder(state)
    for _ in range(4):
        obs = envmod.observe_all(state)
        acts = [Action.FORWARD, Action.TURN_LEFT]
        state, r, _ = envmod.apply_actions(state, acts, rng)
        rec(obs, acts, r, state)
    frames, rows = envmod.read_replay(*rec.write(tmp_path, "ep"))
    assert len(frames) == 5 and frames[-1] == state.lattice
    assert len(rows) == 10
    last = [r for r in rows if int(r["step"]) == 4]
    assert [(int(r["row"]), int(r["col"])) for r in last] == [tuple(x) for x in state.positions.tolist()]
    assert last[1]["orientation"] == Orientation(int(state.orientations[1])).name
