"""Command line entry point: ``ffagents <ffm|train|sweep|eval|replay|plot> [options]``.

Configuration precedence, lowest first: built-in defaults, ``--preset``,
``--config`` file, ``--set section.key=value`` overrides, dedicated flags
(``--seed``, ``--out``, ``--episodes``, ``--workers``).

Exit codes: 0 success, 1 configuration error, 2 runtime or numerical
failure, 3 I/O failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import CheckpointError, ConfigError, ContractViolation, NonConvergence, NumericalFailure

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("ffagents")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors count as configuration errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="configuration file (INI sections with key = value)")
    p.add_argument("--preset", help="named parameter preset applied before the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted configuration key; repeatable")
    p.add_argument("--seed", type=int, help="master seed (u64)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--episodes", type=int, help="number of episodes (eval: frozen rollouts)")
    p.add_argument("--workers", type=int, help="parallel workers for sweeps")
    p.add_argument("--quiet", action="store_true", help="only print errors")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ffagents", description="Forest-fire cellular automaton with learning agents.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("ffm", "agent-free forest fire run"), ("train", "train a population of agents"),
                       ("sweep", "training sweep over (p_tree, p_fire)")):
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("eval", help="frozen-weight rollouts from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint file written by train")
    p.add_argument("--greedy", action="store_true", help="arg-max actions instead of sampling")
    p = sub.add_parser("replay", help="decode a recorded episode replay")
    _common(p)
    p.add_argument("source", help="<stem>_frames.bin or a directory of replays")
    p.add_argument("--every", type=int, default=50, help="text snapshot cadence in steps (0: none)")
    p = sub.add_parser("plot", help="re-render figures from a run directory's CSVs")
    p.add_argument("run_dir")
    p.add_argument("--kind", choices=("ffm", "train", "sweep"), help="run type (detected when omitted)")
    p.add_argument("--quiet", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace):
    from .harness import config as cfgmod

    base = cfgmod.preset(args.preset) if args.preset else None
    cfg = cfgmod.load(args.config, base) if args.config else (base or cfgmod.RunConfig())
    values = cfgmod.parse_overrides(args.overrides)
    values["run.kind"] = args.command
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError("--seed must be an unsigned 64-bit integer")
        values["run.seed"] = args.seed
    if args.out is not None:
        values["run.out"] = args.out
    if args.episodes is not None:
        values["eval.episodes" if args.command == "eval" else "run.episodes"] = args.episodes
    if args.workers is not None:
        values["run.workers"] = args.workers
    if getattr(args, "checkpoint", None):
        values["eval.checkpoint"] = args.checkpoint
    if getattr(args, "greedy", False):
        values["eval.greedy"] = True
    return cfgmod.build(values, cfg)


def dispatch(args: argparse.Namespace) -> None:
    from .harness import plots, runs

    if args.command == "plot":
        paths = plots.render_plots(args.run_dir, kind=args.kind)
        log.info("wrote %d figure(s)", len(paths))
        return
    cfg = resolve_config(args)
    render = not args.no_plots
    if args.command == "ffm":
        art = runs.run_ffm(cfg, render=render)
    elif args.command == "train":
        art = runs.run_train(cfg, render=render)
    elif args.command == "sweep":
        art = runs.run_sweep(cfg, render=render)
    elif args.command == "eval":
        art = runs.run_eval(cfg, render=render)
    else:
        art = runs.run_replay(cfg, args.source, every=args.every, render=render)
    log.info("%s run written to %s (status: %s)", args.command, art.root, art.status)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (NumericalFailure, NonConvergence, CheckpointError, ContractViolation) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
