"""Observation-based measures of agent arrangement and episode statistics.

All spatial measures work on egocentric mean-observation matrices: windows
centred on each agent with its front pointing right, averaged over agents and
over the second half of an episode (and, for a whole run, over the second
half of the episodes).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import CH_AGENT, CH_TREE, CHANNELS, N_ACTIONS, EpisodeLog
from .errors import ContractViolation


def second_half(total: int) -> range:
    return range(total // 2, total)


def mean_obs_episode(observations: np.ndarray, step_range: range | None = None) -> np.ndarray:
    """Average ``observations`` of shape (T, N, C, w, w) over agents, then over steps.

    Divides by the exact number of included steps so every entry stays in [0, 1].
    """
    observations = np.asarray(observations)
    if observations.ndim != 5:
        raise ContractViolation(f"expected (steps, agents, channels, w, w), got {observations.shape}")
    steps = second_half(observations.shape[0]) if step_range is None else step_range
    idx = [t for t in steps if 0 <= t < observations.shape[0]]
    if not idx or observations.shape[1] == 0:
        raise ContractViolation("empty step range")
    return observations[idx].astype(np.float64).mean(axis=1).mean(axis=0)


class MeanObsAccumulator:
    """Streaming version of :func:`mean_obs_episode` for one episode."""

    def __init__(self, episode_steps: int, window: int, channels: int = 4, step_range: range | None = None):
        self.steps = second_half(episode_steps) if step_range is None else step_range
        self.total = np.zeros((channels, window, window), dtype=np.float64)
        self.count = 0

    def add(self, t: int, observations: np.ndarray) -> None:
        if t in self.steps:
            self.total += observations.mean(axis=0)
            self.count += 1

    def result(self) -> np.ndarray:
        if self.count == 0:
            raise ContractViolation("no steps accumulated")
        return self.total / self.count


def mean_obs_run(per_episode: Sequence[np.ndarray], episode_range: range | None = None) -> np.ndarray:
    """Entrywise mean of per-episode matrices; defaults to the second half of the run."""
    n = len(per_episode)
    episodes = second_half(n) if episode_range is None else episode_range
    idx = [e for e in episodes if 0 <= e < n]
    if not idx:
        raise ContractViolation("empty episode range")
    return np.mean([np.asarray(per_episode[e], dtype=np.float64) for e in idx], axis=0)


def _check_window(m: np.ndarray) -> tuple[int, int]:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] % 2 == 0:
        raise ContractViolation(f"expected an odd square window, got shape {m.shape}")
    return m.shape[0], m.shape[0] // 2


def clustering_ratio(m_agent: np.ndarray) -> float:
    """Mean agent-channel value over the 8 Moore cells around the window centre."""
    w, h = _check_window(m_agent)
    if w < 3:
        raise ContractViolation("clustering ratio needs at least a 3x3 window")
    block = np.asarray(m_agent, dtype=np.float64)[h - 1:h + 2, h - 1:h + 2]
    return float((block.sum() - block[1, 1]) / 8.0)


def chessboard_classes(window: int) -> tuple[np.ndarray, np.ndarray]:
    """Masks of the expected-empty and expected-tree cells of a w x w window.

    A fire-proof chessboard around the agent keeps its four orthogonal
    neighbours empty and trees on the diagonals, so cells of the centre's
    parity are expected to hold trees and the other parity class is expected
    empty. The centre itself belongs to neither class.
    """
    h = window // 2
    i, j = np.indices((window, window))
    same = (i + j) % 2 == (2 * h) % 2
    centre = (i == h) & (j == h)
    expect_tree = same & ~centre
    expect_empty = ~same
    return expect_empty, expect_tree


def chessboard_measure(m_tree: np.ndarray) -> float:
    """Agreement of a mean tree window with the chessboard pattern, in [0, 1].

    0.5 for an empty or a full window, 1 for a perfect chessboard, 0 for the
    inverted pattern.
    """
    w, _ = _check_window(m_tree)
    m = np.asarray(m_tree, dtype=np.float64)
    expect_empty, expect_tree = chessboard_classes(w)
    score = (1.0 - m[expect_empty]).sum() + m[expect_tree].sum()
    return float(score / (expect_empty.sum() + expect_tree.sum()))


@dataclass
class EpisodeStats:
    episode: int
    trees_mean: float
    trees_std: float
    fires_mean: float
    fires_std: float
    resources_mean: float
    resources_std: float
    action_freq: np.ndarray
    reward_mean: float
    reward_std: float
    agent_density: float
    chessboard: float


def episode_stats(log: EpisodeLog) -> EpisodeStats:
    if log.steps_done != log.episode_steps:
        raise ContractViolation(f"episode {log.episode} log truncated at {log.steps_done}/{log.episode_steps} steps")
    if log.mean_obs is None:
        raise ContractViolation("episode log carries no mean observation")
    counts = np.bincount(log.actions.ravel().astype(np.int64), minlength=N_ACTIONS)
    freq = counts / counts.sum()
    totals = log.totals
    return EpisodeStats(
        episode=log.episode,
        trees_mean=float(log.trees.mean()), trees_std=float(log.trees.std()),
        fires_mean=float(log.fires.mean()), fires_std=float(log.fires.std()),
        resources_mean=float(log.resources.mean()), resources_std=float(log.resources.std()),
        action_freq=freq,
        reward_mean=float(totals.mean()), reward_std=float(totals.std()),
        agent_density=clustering_ratio(log.mean_obs[CH_AGENT]),
        chessboard=chessboard_measure(log.mean_obs[CH_TREE]),
    )


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

METRICS_HEADER = [
    "episode", "chessboard", "agent_density", "trees_mean", "trees_std", "fires_mean", "fires_std",
    "reward_mean", "reward_std", "p_forward", "p_left", "p_right", "p_harvest",
]
EPISODE_SUMMARY_HEADER = [
    "episode", "mean_reward", "std_reward", "trees_mean", "trees_std", "fires_mean", "fires_std",
    "resources_mean", "p_forward", "p_left", "p_right", "p_harvest",
]


def fmt(x: float) -> str:
    return repr(float(x))


def metrics_row(s: EpisodeStats) -> list:
    return [s.episode, fmt(s.chessboard), fmt(s.agent_density), fmt(s.trees_mean), fmt(s.trees_std),
            fmt(s.fires_mean), fmt(s.fires_std), fmt(s.reward_mean), fmt(s.reward_std),
            *(fmt(p) for p in s.action_freq)]


def summary_row(s: EpisodeStats) -> list:
    return [s.episode, fmt(s.reward_mean), fmt(s.reward_std), fmt(s.trees_mean), fmt(s.trees_std),
            fmt(s.fires_mean), fmt(s.fires_std), fmt(s.resources_mean), *(fmt(p) for p in s.action_freq)]


def write_grid_csv(path: Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([[fmt(v) for v in row] for row in np.asarray(grid)])


def read_grid_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh) if row])


def write_mean_obs(directory: Path, tag: str, mean_obs: np.ndarray) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, name in enumerate(CHANNELS):
        path = directory / f"{tag}_{name}.csv"
        write_grid_csv(path, mean_obs[c])
        paths.append(path)
    return paths
