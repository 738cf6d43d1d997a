"""Experiment drivers: agent-free CA runs, training, sweeps, evaluation and replay.

Each driver writes into a run directory and finishes by writing
``manifest.tsv`` (``relative-path<TAB>sha-256`` per file, preceded by a
``#status`` line).
"""
from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import ffm
from ..env import CHANNELS, read_replay
from ..errors import CheckpointError, ConfigError, NumericalFailure
from ..learner import TRAIN_LOG_HEADER, Trainer, load_checkpoint, save_checkpoint
from ..metrics import (EPISODE_SUMMARY_HEADER, METRICS_HEADER, metrics_row, summary_row, write_grid_csv,
                       write_mean_obs)
from ..seeding import derived_seed, substream
from . import config as cfgmod
from .config import RunConfig

log = logging.getLogger(__name__)

MANIFEST = "manifest.tsv"
CONFIG_ECHO = "config.ini"


@dataclass
class RunArtifacts:
    root: Path
    files: list[Path] = field(default_factory=list)
    status: str = "ok"
    failures: dict[str, str] = field(default_factory=dict)  # relative path -> reason

    def add(self, *paths: Path) -> None:
        self.files.extend(Path(p) for p in paths)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(art: RunArtifacts) -> Path:
    """Digest every file under the run directory (except the manifest)."""
    root = art.root
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST)
    lines = [f"#status\t{art.status}"]
    lines += [f"#failed\t{rel}\t{reason}" for rel, reason in sorted(art.failures.items())]
    lines += [f"{p.relative_to(root).as_posix()}\t{sha256_file(p)}" for p in paths]
    target = root / MANIFEST
    target.write_text("\n".join(lines) + "\n")
    return target


def read_manifest(path: Path) -> tuple[str, dict[str, str], dict[str, str]]:
    """Return (status, {path: digest}, {failed path: reason})."""
    status, entries, failed = "", {}, {}
    for line in Path(path).read_text().splitlines():
        key, _, value = line.partition("\t")
        if key == "#status":
            status = value
        elif key == "#failed":
            rel, _, reason = value.partition("\t")
            failed[rel] = reason
        elif key:
            entries[key] = value
    return status, entries, failed


def prepare_dir(path: str | Path) -> Path:
    """Create the output directory and prove it is writable (raises OSError otherwise)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    probe = root / ".write-test"
    probe.write_text("")
    probe.unlink()
    return root


def echo_config(cfg: RunConfig, root: Path) -> Path:
    path = root / CONFIG_ECHO
    path.write_text(cfgmod.dumps(cfg))
    return path


class _CsvSink:
    def __init__(self, path: Path, header: list[str]):
        self.path = path
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(header)

    def rows(self, rows) -> None:
        self.writer.writerows(rows)

    def close(self) -> None:
        self.fh.close()


# ---------------------------------------------------------------------------
# agent-free forest fire
# ---------------------------------------------------------------------------

def run_ffm(cfg: RunConfig, render: bool = True) -> RunArtifacts:
    root = prepare_dir(cfg.out)
    art = RunArtifacts(root)
    art.add(echo_config(cfg, root))
    spec = cfg.ffm_run
    L = spec.grid_size
    rng = substream(cfg.seed, "ffm-ca")
    init = substream(cfg.seed, "ffm-init")
    cells = np.where(init.random((L, L)) < spec.init_density, ffm.TREE, ffm.EMPTY).astype(np.uint8)
    lattice = ffm.Lattice(cells)
    ledger = ffm.CascadeLedger(L)

    every = spec.snapshot_every
    chunk = every if every > 0 else spec.steps
    frames = [lattice.copy()] if every > 0 else []
    series = []
    done = 0
    while done < spec.steps:
        n = min(chunk, spec.steps - done)
        lattice, part = ffm.run_ca(lattice, cfg.ffm, n, rng, ledger)
        series.append(part)
        done += n
        if every > 0:
            frames.append(lattice.copy())

    burning = np.concatenate([s.burning for s in series])
    trees = np.concatenate([s.trees for s in series])
    resources = np.concatenate([s.resources for s in series])
    empty = L * L - trees - burning
    ts_path = root / "timeseries.csv"
    with open(ts_path, "w", newline="") as fh:
        fh.write("step,burning,trees,resources,empty\n")
        steps = np.arange(1, spec.steps + 1)
        np.savetxt(fh, np.column_stack([steps, burning, trees, resources, empty]), fmt="%d", delimiter=",")
    casc_path = root / "cascades.csv"
    ffm.write_cascade_csv(casc_path, ledger.records())
    art.add(ts_path, casc_path)

    # frames around the largest burst
    snaps = root / "snapshots"
    snaps.mkdir(exist_ok=True)
    if every > 0:
        ffm.write_frames(snaps / "periodic_frames.bin", frames)
        for lat in frames:
            (snaps / f"periodic_{lat.generation:08d}.txt").write_text(lat.to_text())
    burst = _burst_frames(cfg, burning)
    if burst:
        ffm.write_frames(snaps / "burst_frames.bin", burst)
        for lat in burst:
            (snaps / f"burst_{lat.generation:08d}.txt").write_text(lat.to_text())
    summary = root / "summary.csv"
    sizes = np.array([r.size for r in ledger.records()], dtype=np.int64)
    half = spec.steps // 2
    with open(summary, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["quantity", "value"])
        w.writerow(["cascades", len(sizes)])
        w.writerow(["cascade_size_min", int(sizes.min()) if sizes.size else 0])
        w.writerow(["cascade_size_max", int(sizes.max()) if sizes.size else 0])
        w.writerow(["tree_density_second_half", repr(float(trees[half:].mean() / (L * L)))])
        w.writerow(["fire_density_second_half", repr(float(burning[half:].mean() / (L * L)))])
    if render:
        from .plots import render_plots
        render_plots(root, kind="ffm")
    art.status = "ok"
    write_manifest(art)
    return art


def _burst_frames(cfg: RunConfig, burning: np.ndarray) -> list[ffm.Lattice]:
    """Re-simulate to capture ``snapshot_count`` frames spanning the largest burst."""
    spec = cfg.ffm_run
    if spec.snapshot_count <= 0 or burning.max() == 0:
        return []
    peak = int(np.argmax(burning)) + 1
    start = max(1, peak - 2 * spec.snapshot_count)
    wanted = set(np.linspace(start, min(spec.steps, peak + 2 * spec.snapshot_count),
                             spec.snapshot_count).astype(int).tolist())
    rng = substream(cfg.seed, "ffm-ca")
    init = substream(cfg.seed, "ffm-init")
    L = spec.grid_size
    lattice = ffm.Lattice(np.where(init.random((L, L)) < spec.init_density, ffm.TREE, ffm.EMPTY).astype(np.uint8))
    out = []
    if start > 1:
        lattice, _ = ffm.run_ca(lattice, cfg.ffm, start - 1, rng)
    for g in range(start, max(wanted) + 1):
        lattice = ffm.step_ca(lattice, cfg.ffm, rng)
        if g in wanted:
            out.append(lattice.copy())
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _is_snapshot(e: int, episodes: int, every: int) -> bool:
    return e == 0 or e == episodes - 1 or (every > 0 and (e + 1) % every == 0)


def run_train(cfg: RunConfig, render: bool = True, light: bool = False) -> RunArtifacts:
    """Train and log every episode.

    ``light`` (used for sweep cells) skips checkpoints, replays and the
    mean-observation grids.
    """
    root = prepare_dir(cfg.out)
    art = RunArtifacts(root)
    art.add(echo_config(cfg, root))
    trainer = Trainer(cfg.env, cfg.trainer, cfg.network)
    E = cfg.episodes
    every = cfg.snapshot_every
    metrics = _CsvSink(root / "metrics.csv", METRICS_HEADER)
    summary = _CsvSink(root / "episodes.csv", EPISODE_SUMMARY_HEADER)
    tlog = _CsvSink(root / "training_log.csv", TRAIN_LOG_HEADER)
    obs_dir = root / "mean_obs"
    window_sum = np.zeros((len(CHANNELS), cfg.env.obs_window, cfg.env.obs_window))
    window_start = 0
    run_sum = np.zeros_like(window_sum)
    run_count = 0
    try:
        for e in range(E):
            snap = _is_snapshot(e, E, every) and not light
            result = trainer.run_episode(record_replay=snap)
            metrics.rows([metrics_row(result.stats)])
            summary.rows([summary_row(result.stats)])
            tlog.rows(result.agent_rows)
            m = result.log.mean_obs
            window_sum += m
            if e >= E // 2:
                run_sum += m
                run_count += 1
            if not light and (e == E - 1 or (every > 0 and (e + 1) % every == 0)):
                write_mean_obs(obs_dir, f"episodes_{window_start:06d}_{e:06d}", window_sum / (e + 1 - window_start))
                window_sum[:] = 0.0
                window_start = e + 1
            if snap:
                result.replay.write(root / "replays", f"episode_{e:06d}")
                (root / "checkpoints").mkdir(exist_ok=True)
                save_checkpoint(root / "checkpoints" / f"episode_{e:06d}.ckpt", trainer.net, cfg.trainer,
                                _rng_states_json(trainer), {"episode": e, "config": cfgmod.dumps(cfg)})
            if (e + 1) % 100 == 0:
                log.info("episode %d/%d reward %.2f chessboard %.3f", e + 1, E, result.stats.reward_mean,
                         result.stats.chessboard)
    except NumericalFailure as exc:
        art.status = f"failed: numerical failure {exc} {exc.context}"
        raise
    finally:
        metrics.close()
        summary.close()
        tlog.close()
        if art.status != "ok":
            write_manifest(art)
    if not light:
        write_mean_obs(obs_dir, "run_second_half", run_sum / run_count)
    if render:
        from .plots import render_plots
        render_plots(root, kind="train")
    write_manifest(art)
    return art


def _rng_states_json(trainer: Trainer) -> dict:
    # bit generator states hold plain ints and strings already
    return trainer.rng_states()


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

SWEEP_CELLS_HEADER = ["cell", "p_tree", "p_fire", "seed", "status", "chessboard_max", "agent_density_max"]


def sweep_cells(cfg: RunConfig) -> list[tuple[int, float, float]]:
    cells = []
    for j, pf in enumerate(cfg.sweep.p_fire):
        for i, pt in enumerate(cfg.sweep.p_tree):
            cells.append((j * len(cfg.sweep.p_tree) + i, pt, pf))
    return cells


def cell_config(cfg: RunConfig, index: int, p_tree: float, p_fire: float) -> RunConfig:
    seed = derived_seed(cfg.seed, "sweep-cell", index)
    return cfgmod.build({
        "run.kind": "train", "run.seed": seed, "ffm.p_tree": p_tree, "ffm.p_fire": p_fire,
        "run.out": str(Path(cfg.out) / "cells" / f"cell_{index:03d}"), "run.workers": 1,
    }, cfg)


def _run_cell(args) -> tuple[int, str, float, float]:
    cfg, index, p_tree, p_fire, render = args
    sub = cell_config(cfg, index, p_tree, p_fire)
    try:
        run_train(sub, render=render, light=True)
        chess, dens = _series_max(Path(sub.out) / "metrics.csv")
        return index, "ok", chess, dens
    except Exception as exc:  # isolated per cell by contract
        return index, f"failed: {type(exc).__name__}: {exc}", float("nan"), float("nan")


def _series_max(path: Path) -> tuple[float, float]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return max(float(r["chessboard"]) for r in rows), max(float(r["agent_density"]) for r in rows)


def run_sweep(cfg: RunConfig, render: bool = True) -> RunArtifacts:
    root = prepare_dir(cfg.out)
    art = RunArtifacts(root)
    art.add(echo_config(cfg, root))
    cells = sweep_cells(cfg)
    jobs = [(cfg, idx, pt, pf, render) for idx, pt, pf in cells]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    by_index = {r[0]: r for r in results}

    nt, nf = len(cfg.sweep.p_tree), len(cfg.sweep.p_fire)
    chess = np.full((nf, nt), np.nan)
    dens = np.full((nf, nt), np.nan)
    with open(root / "sweep_cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_CELLS_HEADER)
        for idx, pt, pf in cells:
            _, status, c, d = by_index[idx]
            j, i = divmod(idx, nt)
            chess[j, i], dens[j, i] = c, d
            w.writerow([idx, repr(pt), repr(pf), derived_seed(cfg.seed, "sweep-cell", idx), status, repr(c), repr(d)])
    _write_heatmap(root / "chessboard_max.csv", cfg, chess)
    _write_heatmap(root / "agent_density_max.csv", cfg, dens)
    failed = [r for r in results if r[1] != "ok"]
    for idx, status, _, _ in failed:
        art.failures[f"cells/cell_{idx:03d}"] = status
    art.status = "ok" if not failed else f"partial: {len(failed)} of {len(results)} cells failed"
    if render:
        from .plots import render_plots
        render_plots(root, kind="sweep")
    write_manifest(art)
    return art


def _write_heatmap(path: Path, cfg: RunConfig, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["p_fire\\p_tree", *(repr(float(v)) for v in cfg.sweep.p_tree)])
        for pf, row in zip(cfg.sweep.p_fire, grid):
            w.writerow([repr(float(pf)), *(repr(float(v)) for v in row)])


def read_heatmap(path: Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    p_tree = np.array([float(v) for v in rows[0][1:]])
    p_fire = np.array([float(r[0]) for r in rows[1:]])
    grid = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return p_tree, p_fire, grid


# ---------------------------------------------------------------------------
# evaluation and replay
# ---------------------------------------------------------------------------

def run_eval(cfg: RunConfig, checkpoint: str | Path | None = None, render: bool = True) -> RunArtifacts:
    """Roll out frozen networks from a checkpoint; stochastic sampling unless ``eval.greedy``."""
    ckpt_path = Path(checkpoint or cfg.eval.checkpoint)
    if not str(ckpt_path) or not ckpt_path.is_file():
        raise ConfigError(f"checkpoint not found: {ckpt_path}")
    ckpt = load_checkpoint(ckpt_path, expected=cfg.network)
    if ckpt.net.population != cfg.env.agents:
        raise CheckpointError(f"checkpoint holds {ckpt.net.population} agents, config expects {cfg.env.agents}")
    root = prepare_dir(cfg.out)
    art = RunArtifacts(root)
    art.add(echo_config(cfg, root))
    trainer = Trainer(cfg.env, cfg.trainer, cfg.network, net=ckpt.net.copy(), learn=False, greedy=cfg.eval.greedy)
    n_ep = cfg.eval.episodes
    metrics = _CsvSink(root / "metrics.csv", METRICS_HEADER)
    summary = _CsvSink(root / "episodes.csv", EPISODE_SUMMARY_HEADER)
    tlog = _CsvSink(root / "training_log.csv", TRAIN_LOG_HEADER)
    try:
        for e in range(n_ep):
            result = trainer.run_episode(record_replay=e in (0, n_ep - 1))
            metrics.rows([metrics_row(result.stats)])
            summary.rows([summary_row(result.stats)])
            tlog.rows(result.agent_rows)
            if result.replay is not None:
                result.replay.write(root / "replays", f"episode_{e:06d}")
            write_mean_obs(root / "mean_obs", f"episode_{e:06d}", result.log.mean_obs)
    finally:
        metrics.close()
        summary.close()
        tlog.close()
    # frozen weights: re-saving reproduces the input checkpoint byte for byte
    save_checkpoint(root / "checkpoint_resaved.ckpt", trainer.net, ckpt.trainer, ckpt.rng_states, ckpt.meta)
    if render:
        from .plots import render_plots
        render_plots(root, kind="train")
    write_manifest(art)
    return art


def run_replay(cfg: RunConfig, source: str | Path, every: int = 1, render: bool = True) -> RunArtifacts:
    """Decode a replay (``<stem>_frames.bin`` + ``<stem>_agents.csv``) into text snapshots and a summary."""
    src = Path(source)
    if src.is_dir():
        candidates = sorted(src.glob("*_frames.bin"))
        if not candidates:
            raise ConfigError(f"no replay frames in {src}")
        frames_path = candidates[-1]
    elif not src.exists() and src.with_name(src.name + "_frames.bin").is_file():
        frames_path = src.with_name(src.name + "_frames.bin")
    else:
        frames_path = src
    agents_path = frames_path.with_name(frames_path.name.replace("_frames.bin", "_agents.csv"))
    if not frames_path.is_file():
        raise ConfigError(f"replay frames not found: {frames_path}")
    frames = ffm.read_frames(frames_path)
    rows = read_replay(frames_path, agents_path)[1] if agents_path.is_file() else []
    root = prepare_dir(cfg.out)
    art = RunArtifacts(root)
    by_step: dict[int, list[dict]] = {}
    for r in rows:
        by_step.setdefault(int(r["step"]), []).append(r)
    snap_dir = root / "frames"
    snap_dir.mkdir(exist_ok=True)
    with open(root / "replay_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "generation", "trees", "resources", "fires", "agents_on_fire", "reward_sum"])
        for step, lat in enumerate(frames):
            counts = lat.counts()
            agents = by_step.get(step, [])
            on_fire = sum(lat.cells[int(a["row"]), int(a["col"])] == ffm.FIRE for a in agents)
            w.writerow([step, lat.generation, counts["trees"], counts["resources"], counts["fires"], on_fire,
                        repr(sum(float(a["reward"]) for a in agents))])
            if every > 0 and step % every == 0:
                (snap_dir / f"step_{step:06d}.txt").write_text(_text_with_agents(lat, agents))
    if render:
        from .plots import render_lattice
        picks = sorted({0, len(frames) // 2, len(frames) - 1})
        for step in picks:
            render_lattice(frames[step], root / f"frame_{step:06d}.svg", by_step.get(step, []))
    write_manifest(art)
    return art


def _text_with_agents(lattice: ffm.Lattice, agents: list[dict]) -> str:
    grid = [list(row) for row in lattice.to_text().splitlines()]
    arrows = {"NORTH": "^", "EAST": ">", "SOUTH": "v", "WEST": "<"}
    for a in agents:
        grid[int(a["row"])][int(a["col"])] = arrows.get(a["orientation"], "A")
    return "\n".join("".join(r) for r in grid) + "\n"


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
