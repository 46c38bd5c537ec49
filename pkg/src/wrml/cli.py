"""Command-line entry point: ``wrml <stage> --config cfg.yaml --out run/``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig
from .errors import ConfigError, NumericalError
from .experiment import STAGES, Run, StageError, run_experiment, run_stage

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_STAGE = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wrml", description="Weighted RML experiments")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "run-all"):
        sp = sub.add_parser(name, help="run all stages in order" if name == "run-all"
                            else f"run the {name} stage")
        sp.add_argument("--config", help="YAML experiment config (defaults when omitted)")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path, seed) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed is not None:
        data = cfg.to_dict()
        data["master_seed"] = seed
        cfg = ExperimentConfig.from_dict(data)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
        if args.command == "run-all":
            out = run_experiment(cfg, args.out)
            print(json.dumps(Run(cfg, out).manifest().get("stages", {}), indent=2, sort_keys=True))
        else:
            run = Run(cfg, args.out)
            cfg.dump(run.path("config.yaml"))
            print(json.dumps(run_stage(run, args.command), indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL if isinstance(exc.cause, NumericalError) else EXIT_STAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
