"""Experiment harness: configuration, run drivers, plots and the command line."""
from .config import RunConfig, build, dumps, load, loads, parse_overrides, preset
from .runs import RunArtifacts, run_eval, run_ffm, run_replay, run_sweep, run_train

__all__ = ["RunConfig", "RunArtifacts", "build", "dumps", "load", "loads", "parse_overrides", "preset",
           "run_eval", "run_ffm", "run_replay", "run_sweep", "run_train"]
