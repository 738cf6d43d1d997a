"""Run configuration: an INI file of ``[section]`` blocks with ``key = value`` entries.

Every tunable has a dotted name ``section.key`` (``ffm.p_tree``,
``env.agents``, ``trainer.gamma``...). Values given on the command line with
``--set section.key=value`` override the file. The fully resolved
configuration is echoed into each run directory and parses back to an equal
:class:`RunConfig`.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field
from pathlib import Path

from ..env import EnvParams
from ..errors import ConfigError
from ..ffm import FfmParams
from ..learner import Architecture, TrainerConfig

KINDS = ("ffm", "train", "sweep", "eval", "replay")


@dataclass(frozen=True)
class FfmRun:
    """Agent-free CA experiment (lattice side, duration and output cadence)."""

    grid_size: int = 50
    steps: int = 1_000_000
    init_density: float = 0.0
    snapshot_every: int = 0   # 0: no periodic lattice snapshots
    snapshot_count: int = 4   # frames kept around the largest cascade


@dataclass(frozen=True)
class SweepGrid:
    p_tree: tuple[float, ...] = (0.02, 0.04, 0.06)
    p_fire: tuple[float, ...] = (0.002, 0.004, 0.006)


@dataclass(frozen=True)
class EvalSpec:
    checkpoint: str = ""
    episodes: int = 10
    greedy: bool = False


@dataclass(frozen=True)
class RunConfig:
    kind: str = "train"
    seed: int = 0
    episodes: int = 16000
    out: str = "runs/default"
    snapshot_every: int = 500
    workers: int = 1
    env: EnvParams = field(default_factory=lambda: EnvParams(ffm=FfmParams(p_tree=0.08, p_fire=0.005)))
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    network: Architecture = field(default_factory=Architecture)
    ffm_run: FfmRun = field(default_factory=FfmRun)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    eval: EvalSpec = field(default_factory=EvalSpec)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if self.episodes < 1:
            raise ConfigError("run.episodes must be >= 1")
        if self.snapshot_every < 0 or self.workers < 1:
            raise ConfigError("run.snapshot_every must be >= 0 and run.workers >= 1")
        if self.network.window != self.env.obs_window:
            raise ConfigError("network window must equal env.obs_window")
        if self.kind == "sweep" and (not self.sweep.p_tree or not self.sweep.p_fire):
            raise ConfigError("sweep grid must be non-empty")
        if self.trainer.seed != self.seed:
            raise ConfigError("trainer seed must equal run.seed")

    @property
    def ffm(self) -> FfmParams:
        return self.env.ffm


# dotted key -> (section in file, key in file, target object, attribute, type)
# targets: run, ffm (FfmParams), ffmrun, env, rewards, trainer, network, sweep, eval
_KEYS: list[tuple[str, str, str, type]] = [
    ("run.kind", "run", "kind", str),
    ("run.seed", "run", "seed", int),
    ("run.episodes", "run", "episodes", int),
    ("run.out", "run", "out", str),
    ("run.snapshot_every", "run", "snapshot_every", int),
    ("run.workers", "run", "workers", int),
    ("ffm.p_tree", "ffm", "p_tree", float),
    ("ffm.p_fire", "ffm", "p_fire", float),
    ("ffm.p_resource", "ffm", "p_resource", float),
    ("ffm.grid_size", "ffmrun", "grid_size", int),
    ("ffm.steps", "ffmrun", "steps", int),
    ("ffm.init_density", "ffmrun", "init_density", float),
    ("ffm.snapshot_every", "ffmrun", "snapshot_every", int),
    ("ffm.snapshot_count", "ffmrun", "snapshot_count", int),
    ("env.grid_size", "env", "grid_size", int),
    ("env.agents", "env", "agents", int),
    ("env.episode_steps", "env", "episode_steps", int),
    ("env.obs_window", "env", "obs_window", int),
    ("env.p_init", "env", "p_init", float),
    ("rewards.resource", "env", "reward_resource", float),
    ("rewards.fire", "env", "reward_fire", float),
    ("trainer.gamma", "trainer", "gamma", float),
    ("trainer.lr", "trainer", "lr", float),
    ("trainer.beta", "trainer", "beta", float),
    ("trainer.value_coef", "trainer", "value_coef", float),
    ("trainer.grad_clip", "trainer", "grad_clip", float),
    ("network.conv1", "network", "conv1", int),
    ("network.conv2", "network", "conv2", int),
    ("network.kernel", "network", "kernel", int),
    ("network.hidden", "network", "hidden", int),
    ("network.dtype", "network", "dtype", str),
    ("sweep.p_tree", "sweep", "p_tree", tuple),
    ("sweep.p_fire", "sweep", "p_fire", tuple),
    ("eval.checkpoint", "eval", "checkpoint", str),
    ("eval.episodes", "eval", "episodes", int),
    ("eval.greedy", "eval", "greedy", bool),
]
KEYS = {k: (target, attr, typ) for k, target, attr, typ in _KEYS}


def _parse_value(key: str, raw: str, typ: type):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is tuple:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        return typ(raw)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


def _flatten(cfg: RunConfig) -> dict[str, object]:
    objs = {
        "run": cfg, "ffm": cfg.env.ffm, "ffmrun": cfg.ffm_run, "env": cfg.env, "trainer": cfg.trainer,
        "network": cfg.network, "sweep": cfg.sweep, "eval": cfg.eval,
    }
    return {key: getattr(objs[target], attr) for key, (target, attr, _) in KEYS.items()}


def build(values: dict[str, object], base: RunConfig | None = None) -> RunConfig:
    """Apply typed dotted-key ``values`` on top of ``base`` (defaults when omitted)."""
    flat = _flatten(base or RunConfig())
    for key, value in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        flat[key] = value
    grouped: dict[str, dict] = {}
    for key, (target, attr, _) in KEYS.items():
        grouped.setdefault(target, {})[attr] = flat[key]
    try:
        ffm = FfmParams(**grouped["ffm"])
        env = EnvParams(ffm=ffm, **grouped["env"])
        run = grouped["run"]
        return RunConfig(
            env=env,
            trainer=TrainerConfig(seed=run["seed"], **grouped["trainer"]),
            network=Architecture(window=env.obs_window, **grouped["network"]),
            ffm_run=FfmRun(**grouped["ffmrun"]),
            sweep=SweepGrid(**grouped["sweep"]),
            eval=EvalSpec(**grouped["eval"]),
            **run,
        )
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def parse_overrides(items: list[str]) -> dict[str, object]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        out[key] = _parse_value(key, raw, KEYS[key][2])
    return out


def loads(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from None
    values = {}
    for section in parser.sections():
        for key, raw in parser.items(section):
            dotted = f"{section}.{key}"
            if dotted not in KEYS:
                raise ConfigError(f"unknown configuration key {dotted!r}")
            values[dotted] = _parse_value(dotted, raw, KEYS[dotted][2])
    return build(values, base)


def load(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from None
    return loads(text, base)


def dumps(cfg: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    for key, value in _flatten(cfg).items():
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, _format_value(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

PRESETS: dict[str, dict[str, object]] = {
    # training setup of the learning-dynamics figures
    "full-train": {
        "run.kind": "train", "run.episodes": 16000, "env.grid_size": 10, "env.agents": 30,
        "env.episode_steps": 500, "env.obs_window": 7, "ffm.p_tree": 0.08, "ffm.p_fire": 0.005,
    },
    # bursting CA time series without agents
    "soc-ffm": {
        "run.kind": "ffm", "ffm.grid_size": 50, "ffm.p_tree": 0.003, "ffm.p_fire": 3e-5,
        "ffm.p_resource": 0.0, "ffm.steps": 1_000_000,
    },
    # tree-regrowth x fire-appearance phase space, landmark values on both axes
    "phase-sweep": {
        "run.kind": "sweep", "run.episodes": 16000,
        "sweep.p_tree": (0.001, 0.002, 0.005, 0.01, 0.02, 0.04, 0.06, 0.08, 0.1),
        "sweep.p_fire": (0.0, 0.001, 0.002, 0.003, 0.004, 0.005, 0.006, 0.008, 0.01, 0.02),
    },
    "desk-sweep": {
        "run.kind": "sweep", "run.episodes": 200,
        "sweep.p_tree": (0.03, 0.04, 0.05), "sweep.p_fire": (0.003, 0.004, 0.005),
    },
    "large-lattice": {"env.grid_size": 20, "env.agents": 120},
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return build(PRESETS[name])
