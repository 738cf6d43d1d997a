"""SVG figures rendered from run CSVs.

Plots are never the data of record: each figure is rebuilt from the CSVs in
a run directory. Output uses the Agg backend with fixed SVG metadata and hash
salt so repeated renders of the same data produce the same files.
"""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..env import CHANNELS  # noqa: E402
from ..ffm import Lattice  # noqa: E402
from ..metrics import read_grid_csv  # noqa: E402

plt.rcParams["svg.hashsalt"] = "ffagents"
plt.rcParams["svg.fonttype"] = "none"
_META = {"Date": None, "Creator": None}

STATE_COLOURS = ["#f4f1e8", "#2e7d32", "#1565c0", "#d84315"]  # empty, tree, resource, fire


class MissingInputs(FileNotFoundError):
    """Raised when plot inputs are absent or empty; ``paths`` lists them."""

    def __init__(self, paths: list[Path], reason: str = "missing"):
        self.paths = [Path(p) for p in paths]
        super().__init__(f"{reason} plot input(s): " + ", ".join(str(p) for p in self.paths))


def _require(paths: list[Path]) -> None:
    missing = [p for p in paths if not p.is_file()]
    if missing:
        raise MissingInputs(missing)


def read_table(path: Path) -> dict[str, np.ndarray]:
    """Columns of a numeric CSV with a header row; empty files are rejected by name."""
    path = Path(path)
    _require([path])
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise MissingInputs([path], reason="empty")
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body if r], dtype=np.float64)
    return {name: data[:, i] for i, name in enumerate(header)}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
    return path


def _binned(x: np.ndarray, y: np.ndarray, bins: int = 2000, reduce=np.max) -> tuple[np.ndarray, np.ndarray]:
    if len(x) <= bins:
        return x, y
    edges = np.linspace(0, len(x), bins + 1).astype(int)
    return x[edges[:-1]], np.array([reduce(y[a:b]) for a, b in zip(edges[:-1], edges[1:])])


def plot_training(root: Path) -> list[Path]:
    root = Path(root)
    m = read_table(root / "metrics.csv")
    ep = m["episode"]
    fig, axes = plt.subplots(4, 1, figsize=(7, 9), sharex=True)
    axes[0].plot(ep, m["reward_mean"], lw=0.8)
    axes[0].set_ylabel("mean reward")
    for key, label in (("p_forward", "forward"), ("p_left", "left"), ("p_right", "right"), ("p_harvest", "harvest")):
        axes[1].plot(ep, m[key], lw=0.8, label=label)
    axes[1].set_ylabel("action frequency")
    axes[1].legend(fontsize=7, ncol=4)
    axes[2].plot(ep, m["trees_mean"], lw=0.8, color=STATE_COLOURS[1])
    axes[2].set_ylabel("trees")
    axes[3].plot(ep, m["fires_mean"], lw=0.8, color=STATE_COLOURS[3])
    axes[3].set_ylabel("fires")
    axes[3].set_xlabel("episode")
    out = [_save(fig, root / "timeseries.svg")]

    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(ep, m["chessboard"], lw=0.8, label="chessboard")
    ax.plot(ep, m["agent_density"], lw=0.8, label="agent density")
    ax.set_ylim(0, 1)
    ax.set_xlabel("episode")
    ax.legend(fontsize=8)
    out.append(_save(fig, root / "measures.svg"))

    obs_dir = root / "mean_obs"
    if obs_dir.is_dir():
        tags = sorted({p.name.rsplit("_", 1)[0] for p in obs_dir.glob("*.csv")})
        for tag in tags:
            out.append(plot_mean_obs(obs_dir, tag, root / "plots"))
    return out


def plot_mean_obs(directory: Path, tag: str, out_dir: Path) -> Path:
    paths = [Path(directory) / f"{tag}_{name}.csv" for name in CHANNELS]
    _require(paths)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig, axes = plt.subplots(1, len(CHANNELS), figsize=(3 * len(CHANNELS), 3))
    for ax, name, path in zip(axes, CHANNELS, paths):
        grid = read_grid_csv(path)
        if grid.size == 0:
            raise MissingInputs([path], reason="empty")
        im = ax.imshow(grid, vmin=0, vmax=1, cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=list(axes), shrink=0.8)
    return _save(fig, out_dir / f"mean_obs_{tag}.svg")


def plot_ffm(root: Path) -> list[Path]:
    root = Path(root)
    ts = read_table(root / "timeseries.csv")
    _require([root / "cascades.csv"])
    try:
        casc = read_table(root / "cascades.csv")
    except MissingInputs:  # header only: no cascade happened
        casc = None
    steps = ts["step"]
    area = ts["trees"][0] + ts["burning"][0] + ts["resources"][0] + ts["empty"][0]
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    axes[0].plot(*_binned(steps, ts["burning"]), lw=0.6, color=STATE_COLOURS[3])
    axes[0].set_ylabel("burning sites")
    axes[1].plot(*_binned(steps, ts["trees"] / area, reduce=np.mean), lw=0.6, color=STATE_COLOURS[1], label="trees")
    axes[1].plot(*_binned(steps, ts["burning"] / area, reduce=np.mean), lw=0.6, color=STATE_COLOURS[3], label="fires")
    axes[1].set_ylabel("density")
    axes[1].set_xlabel("step")
    axes[1].legend(fontsize=8)
    out = [_save(fig, root / "timeseries.svg")]
    if casc is not None and casc["size"].size:
        sizes = casc["size"]
        fig, ax = plt.subplots(figsize=(5, 4))
        edges = np.unique(np.logspace(0, np.log10(sizes.max() + 1), 30).astype(int))
        hist, edges = np.histogram(sizes, bins=edges)
        centres = np.sqrt(edges[:-1] * edges[1:])
        keep = hist > 0
        ax.loglog(centres[keep], hist[keep] / np.diff(edges)[keep], "o", ms=3)
        ax.set_xlabel("cascade size")
        ax.set_ylabel("frequency density")
        out.append(_save(fig, root / "cascade_sizes.svg"))
    snaps = root / "snapshots"
    for txt in sorted(snaps.glob("*.txt")) if snaps.is_dir() else []:
        out.append(render_lattice(Lattice.from_text(txt.read_text()), txt.with_suffix(".svg")))
    return out


def plot_sweep(root: Path) -> list[Path]:
    from .runs import read_heatmap

    root = Path(root)
    targets = [("chessboard_max", "maximum chessboard measure"), ("agent_density_max", "maximum agent density")]
    _require([root / f"{name}.csv" for name, _ in targets])
    out = []
    for name, title in targets:
        p_tree, p_fire, grid = read_heatmap(root / f"{name}.csv")
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(grid, origin="lower", vmin=0, vmax=1, cmap="magma", aspect="auto")
        ax.set_xticks(range(len(p_tree)), [f"{v:g}" for v in p_tree], rotation=45, fontsize=7)
        ax.set_yticks(range(len(p_fire)), [f"{v:g}" for v in p_fire], fontsize=7)
        ax.set_xlabel("tree regrowth probability")
        ax.set_ylabel("fire appearance probability")
        ax.set_title(title, fontsize=9)
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        out.append(_save(fig, root / f"{name}.svg"))
    return out


def render_lattice(lattice: Lattice, path: Path, agents: list[dict] | None = None) -> Path:
    from matplotlib.colors import ListedColormap

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(lattice.cells, cmap=ListedColormap(STATE_COLOURS), vmin=0, vmax=3, interpolation="nearest")
    markers = {"NORTH": "^", "EAST": ">", "SOUTH": "v", "WEST": "<"}
    for a in agents or []:
        ax.plot(int(a["col"]), int(a["row"]), markers.get(a["orientation"], "o"), color="black", ms=4)
    ax.set_xticks([])
    ax.set_yticks([])
    ax.set_title(f"generation {lattice.generation}", fontsize=8)
    return _save(fig, Path(path))


def detect_kind(root: Path) -> str:
    root = Path(root)
    if (root / "chessboard_max.csv").exists() or (root / "sweep_cells.csv").exists():
        return "sweep"
    if (root / "timeseries.csv").exists() and not (root / "metrics.csv").exists():
        return "ffm"
    return "train"


def render_plots(root: Path, kind: str | None = None) -> list[Path]:
    """Render every figure for the run at ``root``; raises MissingInputs naming absent CSVs."""
    root = Path(root)
    kind = kind or detect_kind(root)
    if kind == "ffm":
        return plot_ffm(root)
    if kind == "sweep":
        return plot_sweep(root)
    return plot_training(root)
