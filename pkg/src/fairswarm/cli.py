"""Command-line driver: run experiments, render reports, dump transcripts."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from .experiments import (
    ExperimentError, preset, preset_names, run_experiment,
)
from .report import render_report
from .swarm import (
    InvalidConfig, NonConvergence, SimulationError, build_network, run_until,
)


def _parse_seeds(raw: str) -> tuple:
    try:
        return tuple(int(part) for part in raw.split(",") if part.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"seeds must be comma-separated integers, got {raw!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairswarm",
        description="Escrowed piece-exchange simulation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser(
        "run", help="run a preset or scenario file, writing CSVs")
    run_p.add_argument("source",
                       help="preset name (see list-presets) or scenario file")
    run_p.add_argument("--seeds", type=_parse_seeds, default=None,
                       help="comma-separated seed list (default: preset's)")
    run_p.add_argument("--out", default=".", help="output directory")
    run_p.add_argument("--scale", choices=("desk", "full"), default="full",
                       help="desk presets are CI-sized; full match the "
                            "headline scenarios")

    rep_p = sub.add_parser(
        "report", help="render SVG charts and summary.csv from run output")
    rep_p.add_argument("data_dir", help="directory holding experiment CSVs")
    rep_p.add_argument("--out", default=None,
                       help="where to write charts (default: data_dir)")

    sub.add_parser("list-presets", help="show available presets")

    trace_p = sub.add_parser(
        "trace", help="print one exchange-session transcript from a preset")
    trace_p.add_argument("source", help="preset name")
    trace_p.add_argument("--session", type=int, default=0,
                         help="index of the archived session to print")
    trace_p.add_argument("--scale", choices=("desk", "full"), default="desk")
    trace_p.add_argument("--seed", type=int, default=None,
                         help="override the preset's first seed")
    return parser


def _cmd_run(args) -> int:
    written = run_experiment(args.source, seeds=args.seeds,
                             out_dir=args.out, scale=args.scale)
    print(f"wrote {len(written)} files under {args.out}")
    for path in written[-2:]:
        print(f"  {path}")
    return 0


def _cmd_report(args) -> int:
    written = render_report(args.data_dir, out_dir=args.out)
    for path in written:
        print(path)
    return 0


def _cmd_list_presets(args) -> int:
    for name in preset_names():
        found = preset(name)
        arms = ", ".join(sorted(found.configs))
        config = found.configs["proposed"]
        print(f"{name:7s} {found.description}")
        print(f"        nodes={config.n_nodes} seeders={config.n_seeders} "
              f"freeloaders={config.n_freeloaders} pieces={config.n_pieces} "
              f"arms: {arms}")
    return 0


def _cmd_trace(args) -> int:
    found = preset(args.source, scale=args.scale)
    config = found.configs["proposed"]
    seed = args.seed if args.seed is not None else found.seeds[0]
    state = build_network(replace(config, seed=seed, keep_transcripts=True))
    try:
        run_until(state)
    except NonConvergence:
        pass                      # whatever sessions ran are still archived
    archive = state.transcript_archive
    if not archive:
        print("no sessions were archived for this scenario", file=sys.stderr)
        return 1
    if not 0 <= args.session < len(archive):
        print(f"session index out of range: {args.session} "
              f"(archived: {len(archive)})", file=sys.stderr)
        return 1
    sid, proto, text = archive[args.session]
    print(f"# session {sid} protocol {proto} "
          f"(archived {len(archive)} sessions, seed {seed})")
    print(text, end="")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "report": _cmd_report,
    "list-presets": _cmd_list_presets,
    "trace": _cmd_trace,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ExperimentError, SimulationError, InvalidConfig, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
