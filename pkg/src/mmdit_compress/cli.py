"""Command-line entry point.

Every subcommand accepts ``--config FILE``, repeated ``--set a.b=value``
overrides and ``--out DIR``.  Each completed stage prints one JSON summary
line on stdout.  Exit codes: 0 ok, 1 output directory locked, 2 config
error, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .compress import PlanError, build_prune_plan
from .config import load_config
from .data import dump_dataset
from .importance import OMEGA_KINDS, select_prune_set
from .model import ConfigError
from .pipeline import STAGES, LockError, MissingArtifactError, Pipeline, output_lock
from .report import stage_report
from .tensor import NumericError

EXIT_OK, EXIT_LOCKED, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3, 4

SUBCOMMANDS = ("gen-data",) + STAGES + ("report", "run-all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmdit-compress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="subcommand")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-path override, e.g. prune.target_keep=6")
        p.add_argument("--out", help="output directory (overrides config and environment)")
        if name == "estimate-importance":
            p.add_argument("--omega", action="append", choices=OMEGA_KINDS,
                           help="timestep weighting; repeat to write one report per kind")
        if name == "prune":
            p.add_argument("--plan-only", action="store_true",
                           help="print the prune plan without reading or writing weights")
    return parser


def _emit(summary: dict) -> None:
    line = {k: summary[k] for k in ("stage", "status", "output_hash") if k in summary}
    line["inputs"] = summary.get("inputs", {})
    print(json.dumps(line, sort_keys=True), flush=True)


def _plan_only(pipe: Pipeline) -> dict:
    """Plan from stored importance scores when they match the config depth;
    otherwise every layer scores equally and the tie rule decides."""
    cfg = pipe.cfg
    depth = cfg.model.depth
    scores = [0.0] * depth
    path = pipe.stage_dir("estimate-importance") / "importance.json"
    source = "uniform"
    if path.exists():
        stored = json.loads(path.read_text())["scores"]
        if len(stored) == depth:
            scores, source = [0.0 if s is None else s for s in stored], "importance.json"
    keep, remove = select_prune_set(scores, cfg.prune.target_keep, cfg.protected)
    plan = build_prune_plan(keep, remove, depth)
    return {"stage": "prune", "status": "plan", "scores": source, "protected": cfg.protected, **plan.to_dict()}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        pipe = Pipeline(cfg, args.out)
        cmd = args.command
        if cmd == "gen-data":
            for ds in (pipe.train_set, pipe.val_set):
                dump_dataset(ds, pipe.out / "data" / ds.split)
            print(json.dumps({"stage": "gen-data", "status": "ok", "dir": str(pipe.out / "data")}), flush=True)
        elif cmd == "prune" and args.plan_only:
            print(json.dumps(_plan_only(pipe), sort_keys=True), flush=True)
        elif cmd == "report":
            stage_report(pipe.out)
            print(json.dumps({"stage": "report", "status": "ok", "dir": str(pipe.out)}), flush=True)
        elif cmd == "run-all":
            pipe.run_all(emit=_emit)
        else:
            if cmd == "estimate-importance" and args.omega:
                pipe.omega_kinds = args.omega
            with output_lock(pipe.out):
                _emit(pipe.run(cmd))
    except (ConfigError, PlanError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except LockError as e:
        print(str(e), file=sys.stderr)
        return EXIT_LOCKED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
