#!/usr/bin/env python3
"""
🛰️ crazylink - command line

    python main.py run scenarios/c-rust.env [--seed N] [--out DIR]
    python main.py analyze DIR
    python main.py compare DIR DIR [DIR...] [--out FILE]
    python main.py live scenarios/c-rust.env --role {controller,bridge} [--out DIR]

Exit code 0 on success; otherwise the category code of the error
(usage 2, config 3, runtime 4, io 5, codec 6).
"""

import argparse
import sys

from config import configure_logging
from errors import ArtifactError, CrazylinkError, UsageError
from harness import analyze, compare, load_scenario, run_live, run_scenario

logger = configure_logging()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crazylink", description="Latency-aware drone control link testbed")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a scenario on the virtual clock")
    run.add_argument("config", help="scenario file")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--out", help="artifact directory (default artifacts/<scenario>)")

    an = sub.add_parser("analyze", help="CDF and stage statistics for an artifact directory")
    an.add_argument("dir")

    cmp_ = sub.add_parser("compare", help="stack CDFs of several artifact directories")
    cmp_.add_argument("dirs", nargs="+")
    cmp_.add_argument("--out", default="comparison.csv")

    live = sub.add_parser("live", help="run one side on real sockets and serial hardware")
    live.add_argument("config")
    live.add_argument("--role", choices=["controller", "bridge"], required=True)
    live.add_argument("--out", help="artifact directory for the controller role")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "run":
            cfg = load_scenario(args.config)
            if args.seed is not None:
                cfg = cfg.model_copy(update={"seed": args.seed})
            out = run_scenario(cfg, args.out or f"artifacts/{cfg.name}")
            print(f"✅ Artifacts written to {out}")
        elif args.command == "analyze":
            written = analyze(args.dir)
            print(f"✅ Analysis written: {', '.join(str(p) for p in written.values())}")
        elif args.command == "compare":
            out = compare(args.dirs, args.out)
            print(f"✅ Comparison written to {out}")
        elif args.command == "live":
            cfg = load_scenario(args.config)
            out = run_live(cfg, args.role, args.out or f"artifacts/{cfg.name}-live")
            if out:
                print(f"✅ Live artifacts written to {out}")
        return 0
    except CrazylinkError as e:
        logger.error(f"Command failed: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"Command failed: {e}")
        return ArtifactError.exit_code


if __name__ == "__main__":
    sys.exit(main())
