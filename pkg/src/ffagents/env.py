"""Oriented harvesting agents overlaid on the forest fire lattice.

One coupled step runs in three phases:

A. agents act one at a time in a fresh random order (turns, forward moves,
   harvests); a forward move is blocked only by another agent,
B. the CA advances one generation (agents are invisible to the fire rules),
C. every agent standing on a burning cell is penalised.
"""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ffm
from .errors import ConfigError, ContractViolation
from .ffm import EMPTY, FIRE, RESOURCE, TREE, FfmParams, Lattice


class Orientation(enum.IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    def turned_left(self) -> "Orientation":
        return Orientation((self - 1) % 4)

    def turned_right(self) -> "Orientation":
        return Orientation((self + 1) % 4)


# (row, col) unit step for each orientation
DIRECTIONS = np.array([(-1, 0), (0, 1), (1, 0), (0, -1)], dtype=np.int64)


class Action(enum.IntEnum):
    FORWARD = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    HARVEST = 3


N_ACTIONS = len(Action)

# observation channels
CH_TREE, CH_FIRE, CH_RESOURCE, CH_AGENT = range(4)
CHANNELS = ("tree", "fire", "resource", "agent")


@dataclass(frozen=True)
class AgentState:
    id: int
    position: tuple[int, int]
    orientation: Orientation


@dataclass(frozen=True)
class EnvParams:
    grid_size: int = 10
    agents: int = 30
    episode_steps: int = 500
    obs_window: int = 7
    p_init: float = 0.5
    reward_resource: float = 1.0
    reward_fire: float = -10.0
    ffm: FfmParams = field(default_factory=FfmParams)

    def __post_init__(self):
        L, w = self.grid_size, self.obs_window
        if L <= 0:
            raise ConfigError("grid_size must be positive")
        if not 0 < self.agents <= L * L:
            raise ConfigError(f"agents must lie in [1, {L * L}] for a {L}x{L} grid, got {self.agents}")
        if self.episode_steps < 1:
            raise ConfigError("episode_steps must be >= 1")
        if w % 2 == 0 or w < 1 or w > 2 * L - 1:
            raise ConfigError(f"obs_window must be odd and <= {2 * L - 1}, got {w}")
        if not 0.0 <= self.p_init <= 1.0:
            raise ConfigError("p_init must lie in [0, 1]")
        if not self.reward_resource > 0 > self.reward_fire:
            raise ConfigError("rewards must satisfy reward_resource > 0 > reward_fire")
        if abs(self.reward_resource) >= abs(self.reward_fire):
            raise ConfigError("|reward_resource| must be smaller than |reward_fire|")


@dataclass
class EnvState:
    params: EnvParams
    lattice: Lattice
    positions: np.ndarray      # (N, 2) int64 row/col
    orientations: np.ndarray   # (N,) int64 Orientation values
    occupancy: np.ndarray      # (L, L) int64 agent id or -1
    t: int = 0
    episode: int = 0

    @property
    def agents(self) -> list[AgentState]:
        return [
            AgentState(a, (int(r), int(c)), Orientation(int(o)))
            for a, ((r, c), o) in enumerate(zip(self.positions, self.orientations))
        ]

    def check(self) -> None:
        L = self.params.grid_size
        flat = self.positions[:, 0] * L + self.positions[:, 1]
        if np.unique(flat).size != flat.size:
            raise ContractViolation("two agents share a cell")
        expected = np.full((L, L), -1, dtype=np.int64)
        expected[self.positions[:, 0], self.positions[:, 1]] = np.arange(len(flat))
        if not np.array_equal(expected, self.occupancy):
            raise ContractViolation("occupancy map out of sync with agent positions")


def _occupancy(size: int, positions: np.ndarray) -> np.ndarray:
    occ = np.full((size, size), -1, dtype=np.int64)
    occ[positions[:, 0], positions[:, 1]] = np.arange(len(positions))
    return occ


def make_state(params: EnvParams, lattice: Lattice, positions, orientations, t: int = 0, episode: int = 0) -> EnvState:
    """Build a state from explicit placements (used by tests and replays)."""
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 2) % params.grid_size
    orientations = np.asarray(orientations, dtype=np.int64).reshape(-1)
    if len(positions) != params.agents or len(orientations) != params.agents:
        raise ContractViolation(f"expected {params.agents} agents")
    if lattice.size != params.grid_size:
        raise ContractViolation("lattice size does not match params.grid_size")
    state = EnvState(params, lattice, positions, orientations, _occupancy(params.grid_size, positions), t, episode)
    state.check()
    return state


def reset(params: EnvParams, rng: np.random.Generator, episode: int = 0) -> EnvState:
    """Fresh random map (trees with probability p_init, no fire or resources) and agents."""
    L, N = params.grid_size, params.agents
    if N > L * L:
        raise ConfigError("more agents than cells")
    cells = np.where(rng.random((L, L)) < params.p_init, TREE, EMPTY).astype(np.uint8)
    flat = rng.choice(L * L, size=N, replace=False)
    positions = np.stack([flat // L, flat % L], axis=1).astype(np.int64)
    orientations = rng.integers(0, 4, size=N, dtype=np.int64)
    return EnvState(params, Lattice(cells), positions, orientations, _occupancy(L, positions), 0, episode)


# ---------------------------------------------------------------------------
# observations
# ---------------------------------------------------------------------------

_OFFSET_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def window_offsets(window: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-orientation world offsets of every window cell, shape (4, w, w) each.

    Image convention: the agent sits at the centre, its front points to the
    right (+column) and its left points up (-row). An agent facing East
    therefore sees the unrotated world window.
    """
    if window not in _OFFSET_CACHE:
        h = window // 2
        a, b = np.meshgrid(np.arange(window) - h, np.arange(window) - h, indexing="ij")
        dr = np.empty((4, window, window), dtype=np.int64)
        dc = np.empty_like(dr)
        for o in range(4):
            front = DIRECTIONS[o]
            left = DIRECTIONS[(o - 1) % 4]
            dr[o] = b * front[0] - a * left[0]
            dc[o] = b * front[1] - a * left[1]
        _OFFSET_CACHE[window] = (dr, dc)
    return _OFFSET_CACHE[window]


def channel_planes(state: EnvState) -> np.ndarray:
    cells = state.lattice.cells
    planes = np.empty((4,) + cells.shape, dtype=np.uint8)
    planes[CH_TREE] = (cells == TREE) | (cells == RESOURCE)
    planes[CH_FIRE] = cells == FIRE
    planes[CH_RESOURCE] = cells == RESOURCE
    planes[CH_AGENT] = state.occupancy >= 0
    return planes


def observe_all(state: EnvState) -> np.ndarray:
    """Egocentric observations of every agent, shape (N, 4, w, w), dtype uint8."""
    L = state.params.grid_size
    dr, dc = window_offsets(state.params.obs_window)
    o = state.orientations
    rows = (state.positions[:, 0, None, None] + dr[o]) % L
    cols = (state.positions[:, 1, None, None] + dc[o]) % L
    return channel_planes(state)[:, rows, cols].transpose(1, 0, 2, 3)


def observe(state: EnvState, agent_id: int) -> np.ndarray:
    if not 0 <= agent_id < state.params.agents:
        raise ContractViolation(f"no agent with id {agent_id}")
    L = state.params.grid_size
    dr, dc = window_offsets(state.params.obs_window)
    o = state.orientations[agent_id]
    rows = (state.positions[agent_id, 0] + dr[o]) % L
    cols = (state.positions[agent_id, 1] + dc[o]) % L
    return channel_planes(state)[:, rows, cols]


# ---------------------------------------------------------------------------
# dynamics
# ---------------------------------------------------------------------------

@dataclass
class StepEvents:
    consumed: np.ndarray
    burned: np.ndarray
    blocked: np.ndarray
    harvested: np.ndarray
    harvest_noop: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "StepEvents":
        return cls(*(np.zeros(n, dtype=bool) for _ in range(5)))


def apply_actions(
    state: EnvState,
    actions: Sequence[int],
    rng: np.random.Generator,
    ca_rng: np.random.Generator | None = None,
) -> tuple[EnvState, np.ndarray, StepEvents]:
    """Advance the coupled system by one step; ``state`` is updated in place.

    ``rng`` draws the agent resolution order, ``ca_rng`` (defaults to ``rng``)
    drives the CA update.
    """
    params = state.params
    N, L = params.agents, params.grid_size
    actions = np.asarray(actions, dtype=np.int64).reshape(-1)
    if len(actions) != N:
        raise ContractViolation(f"expected {N} actions, got {len(actions)}")
    if state.t >= params.episode_steps:
        raise ContractViolation("episode already finished")
    if actions.size and (actions.min() < 0 or actions.max() >= N_ACTIONS):
        raise ContractViolation("action index out of range")

    rewards = np.zeros(N, dtype=np.float64)
    events = StepEvents.empty(N)
    cells = state.lattice.cells
    occ = state.occupancy
    pos = state.positions
    ori = state.orientations
    act = actions.tolist()
    r_res = params.reward_resource

    for a in rng.permutation(N).tolist():
        kind = act[a]
        if kind == Action.TURN_LEFT:
            ori[a] = (ori[a] - 1) % 4
        elif kind == Action.TURN_RIGHT:
            ori[a] = (ori[a] + 1) % 4
        else:
            dr, dc = DIRECTIONS[ori[a]]
            r, c = int(pos[a, 0]), int(pos[a, 1])
            fr, fc = (r + dr) % L, (c + dc) % L
            if kind == Action.FORWARD:
                if occ[fr, fc] >= 0:
                    events.blocked[a] = True
                    continue
                occ[r, c] = -1
                occ[fr, fc] = a
                pos[a, 0], pos[a, 1] = fr, fc
                if cells[fr, fc] == RESOURCE:
                    cells[fr, fc] = TREE
                    rewards[a] += r_res
                    events.consumed[a] = True
            elif cells[fr, fc] == TREE:
                cells[fr, fc] = EMPTY
                events.harvested[a] = True
            else:
                events.harvest_noop[a] = True

    state.lattice = ffm.step_ca(state.lattice, params.ffm, ca_rng if ca_rng is not None else rng)
    burned = state.lattice.cells[pos[:, 0], pos[:, 1]] == FIRE
    rewards[burned] += params.reward_fire
    events.burned[:] = burned
    state.t += 1
    return state, rewards, events


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class EpisodeLog:
    """Raw per-step record of one episode; see :func:`ffagents.metrics.episode_stats`."""

    episode: int
    episode_steps: int
    rewards: np.ndarray      # (T, N)
    actions: np.ndarray      # (T, N)
    trees: np.ndarray        # (T,) counts after each step (T and T*)
    fires: np.ndarray        # (T,)
    resources: np.ndarray    # (T,)
    mean_obs: np.ndarray | None = None   # (4, w, w) second-half observation mean
    steps_done: int = 0

    @classmethod
    def allocate(cls, episode: int, steps: int, agents: int) -> "EpisodeLog":
        return cls(
            episode, steps,
            np.zeros((steps, agents)), np.zeros((steps, agents), dtype=np.int8),
            np.zeros(steps, dtype=np.int64), np.zeros(steps, dtype=np.int64), np.zeros(steps, dtype=np.int64),
        )

    def record(self, t: int, actions, rewards, lattice: Lattice) -> None:
        self.actions[t] = actions
        self.rewards[t] = rewards
        hist = np.bincount(lattice.cells.ravel(), minlength=4)
        self.trees[t] = hist[TREE] + hist[RESOURCE]
        self.fires[t] = hist[FIRE]
        self.resources[t] = hist[RESOURCE]
        self.steps_done = t + 1

    @property
    def totals(self) -> np.ndarray:
        return self.rewards.sum(axis=0)


Policy = Callable[[np.ndarray], int]
Hook = Callable[[np.ndarray, np.ndarray, np.ndarray, EnvState], None]


def _select(policies, observations: np.ndarray) -> np.ndarray:
    if callable(policies):
        return np.asarray(policies(observations), dtype=np.int64)
    return np.array([int(pol(obs)) for pol, obs in zip(policies, observations)], dtype=np.int64)


def run_episode(
    params: EnvParams,
    policies: Sequence[Policy] | Callable[[np.ndarray], np.ndarray],
    rng: np.random.Generator,
    hook: Hook | None = None,
    episode: int = 0,
    ca_rng: np.random.Generator | None = None,
) -> EpisodeLog:
    """Reset and play one full episode.

    ``policies`` is either one callable per agent (observation -> action) or
    a single callable mapping the (N, 4, w, w) batch to N actions.
    """
    from .metrics import MeanObsAccumulator

    state = reset(params, rng, episode)
    log = EpisodeLog.allocate(episode, params.episode_steps, params.agents)
    acc = MeanObsAccumulator(params.episode_steps, params.obs_window)
    for t in range(params.episode_steps):
        obs = observe_all(state)
        acc.add(t, obs)
        try:
            actions = _select(policies, obs)
        except Exception as exc:
            raise RuntimeError(f"policy selection failed at episode {episode}, step {t}: {exc}") from exc
        state, rewards, _ = apply_actions(state, actions, rng, ca_rng)
        log.record(t, actions, rewards, state.lattice)
        if hook is not None:
            hook(obs, actions, rewards, state)
    log.mean_obs = acc.result()
    return log


# ---------------------------------------------------------------------------
# replay files
# ---------------------------------------------------------------------------

AGENT_CSV_HEADER = ["step", "agent_id", "row", "col", "orientation", "action", "reward"]


class ReplayRecorder:
    """Collects lattice frames and agent rows; frame k is the state after step k (k=0 is the reset)."""

    def __init__(self, state: EnvState):
        self.frames: list[Lattice] = [state.lattice.copy()]
        self.rows: list[list] = []
        self._add_rows(0, state, [-1] * state.params.agents, [0.0] * state.params.agents)

    def _add_rows(self, step, state, actions, rewards):
        for a in range(state.params.agents):
            self.rows.append([step, a, int(state.positions[a, 0]), int(state.positions[a, 1]),
                              Orientation(int(state.orientations[a])).name, int(actions[a]), float(rewards[a])])

    def __call__(self, obs, actions, rewards, state: EnvState) -> None:
        self.frames.append(state.lattice.copy())
        self._add_rows(state.t, state, actions, rewards)

    def write(self, directory: Path, stem: str = "replay") -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        frames_path = directory / f"{stem}_frames.bin"
        agents_path = directory / f"{stem}_agents.csv"
        ffm.write_frames(frames_path, self.frames)
        with open(agents_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(AGENT_CSV_HEADER)
            writer.writerows(self.rows)
        return frames_path, agents_path


def read_replay(frames_path: Path, agents_path: Path) -> tuple[list[Lattice], list[dict]]:
    frames = ffm.read_frames(frames_path)
    with open(agents_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and list(rows[0].keys()) != AGENT_CSV_HEADER:
        raise ContractViolation(f"unexpected agent CSV header in {agents_path}")
    return frames, rows
