"""Command line entry point.

    fedstale run --config exp.cfg [--seed N] [--out-dir D] [--method M] [--preset NAME]
    fedstale summarize --in results/table7

Exit codes: 0 success, 1 config error, 2 run abort.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import PRESETS, load_config, parse_config_text, preset_config, \
    serialize_config
from .harness import run_preset, run_suite, summarize_dir
from .nn import ConfigError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedstale")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a config or preset suite")
    run.add_argument("--config", help="path to a key = value config file")
    run.add_argument("--preset", choices=sorted(PRESETS),
                     help="named experiment grid; --config overlays it")
    run.add_argument("--seed", type=int, help="restrict to a single seed")
    run.add_argument("--method", help="restrict to a single method")
    run.add_argument("--out-dir", help="output directory (overrides config)")

    summ = sub.add_parser("summarize", help="recompute summary.json from metrics.csv")
    summ.add_argument("--in", dest="in_dir", required=True)
    return parser


def _resolved_config(args):
    if args.preset and args.config:
        base = preset_config(args.preset)
        overlay = load_config(args.config)
        # the explicit file wins key by key: reserialize and merge textually
        text = serialize_config(base)
        text += serialize_config(overlay)
        config = parse_config_text(text, source=args.config)
    elif args.preset:
        config = None  # run_preset drives the grid itself
    elif args.config:
        config = load_config(args.config)
    else:
        raise ConfigError("run needs --config and/or --preset")
    return config


def cmd_run(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seeds"] = str(args.seed)
    if args.method is not None:
        overrides["method"] = args.method

    if args.preset and not args.config:
        out = args.out_dir or f"results/{args.preset}"
        grid = run_preset(args.preset, out, overrides or None)
        aborted = [a for cell in grid["cells"].values() for a in cell.get("aborts", [])]
        print(f"preset {args.preset}: {len(grid['cells'])} cells -> {out}")
        if aborted:
            print(f"{len(aborted)} run(s) aborted", file=sys.stderr)
            return 2
        return 0

    config = _resolved_config(args)
    for key, value in overrides.items():
        config = parse_config_text(serialize_config(config) + f"\n{key} = {value}")
    result = run_suite(config, args.out_dir)
    print(f"suite -> {result.out_dir} ({len(config.methods)} methods x "
          f"{len(config.seeds)} seeds)")
    if result.aborted:
        for a in result.aborted:
            print(f"ABORT {a['method']} seed {a['seed']}: {a['reason']}", file=sys.stderr)
        return 2
    return 0


def cmd_summarize(args) -> int:
    summary = summarize_dir(args.in_dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        return cmd_summarize(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
