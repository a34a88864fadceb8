"""Command line entry point: ``gridssp <stage> --config <path> --out <dir>``."""
from __future__ import annotations

import argparse
import logging
import sys

from .pipeline import STAGES, RunConfig, StageError, ValidationFailed, prepare, run_pipeline, stage_synth
from .worldmodel import InputError

log = logging.getLogger("gridssp")

COMMANDS = ("synth", *STAGES, "run")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="gridssp", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="flat key = value configuration file")
    parser.add_argument("--out", required=True, help="artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config)
        if args.command == "synth":
            stage_synth(cfg, args.out)
        elif args.command == "run":
            run_pipeline(cfg, args.out)
        else:
            STAGES[args.command](prepare(cfg, args.out), args.out)
    except StageError as exc:
        log.error("%s", exc)
        return 1 if isinstance(exc.cause, ValidationFailed) else 2
    except (InputError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
