"""``bevkit`` command line.

Exit codes: 0 success, 1 usage, 2 I/O, 3 validation, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from . import pipeline
from .config import MatchThresholds, RunConfig
from .errors import BevIOError, BevkitError, UsageError
from .io import _read


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="RunConfig JSON file (defaults to the toy configuration)")
    p.add_argument("--seed", type=int, default=0, help="seed for random specs and parameters")
    p.add_argument("--out", required=True, help="output directory (or file for render)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bevkit", description="Desk-scale BEV map fusion, evaluation and planning.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic scene (or a paired planning suite)")
    _common(p)
    p.add_argument("--spec", help="SceneSpec JSON; a random spec from --seed is used when omitted")
    p.add_argument("--plan-suite", type=int, metavar="N", help="write N paired planning scenes instead")
    p.add_argument("--truncate-at", type=float, default=30.0, help="range of the truncated planning maps (m)")

    p = sub.add_parser("pipeline", help="run the forward pipeline on a scene directory")
    _common(p)
    p.add_argument("scene", help="scene directory written by gen-synthetic")
    p.add_argument("--params", help="parameter bundle directory (seeded init when omitted)")
    p.add_argument("--check-grads", action="store_true", help="also run the finite-difference suite")

    p = sub.add_parser("eval", help="evaluate a predicted map against ground truth")
    _common(p)
    p.add_argument("pred", help="predicted map JSON")
    p.add_argument("gt", help="ground-truth map JSON")
    p.add_argument("--thresholds", help="true-positive thresholds, e.g. cd=1.0,iou=0.1")

    p = sub.add_parser("plan", help="plan on every scene in a scenes file")
    _common(p)
    p.add_argument("scenes", help="JSON list of {map_file, goal, start}")
    p.add_argument("--max-steps", type=int, default=300)

    p = sub.add_parser("render", help="render a BTF raster (PGM) or a map JSON (PPM)")
    _common(p)
    p.add_argument("input")
    p.add_argument("--radius", type=int, default=0, help="line dilation in cells for map renders")

    p = sub.add_parser("check-grads", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for grad_check.json")
    p.add_argument("--config", help="accepted for symmetry; unused")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.from_json(_read(path).decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise BevIOError(f"{path}: invalid JSON: {exc}") from exc


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required (see bevkit --help)")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    cfg = load_config(args.config)

    if args.command == "gen-synthetic":
        if args.plan_suite is not None:
            if args.plan_suite < 1:
                raise UsageError("--plan-suite needs a positive count")
            pipeline.cmd_gen_plan_suite(cfg, args.out, args.plan_suite, args.seed, args.truncate_at)
        else:
            pipeline.cmd_gen_synthetic(cfg, args.out, args.spec, args.seed)
    elif args.command == "pipeline":
        report = pipeline.cmd_pipeline(cfg, args.scene, args.out, args.params, args.seed, args.check_grads)
        print(json.dumps(report, sort_keys=True))
    elif args.command == "eval":
        if args.thresholds:
            cfg = dataclasses.replace(cfg, thresholds=MatchThresholds.parse(args.thresholds))
        report = pipeline.cmd_eval(cfg, args.pred, args.gt, args.out)
        sys.stdout.write(report.to_csv())
    elif args.command == "plan":
        rate, _ = pipeline.cmd_plan(cfg, args.scenes, args.out, args.max_steps)
        print(f"success_rate {rate:.4f}")
    elif args.command == "render":
        pipeline.cmd_render(cfg, args.input, args.out, args.radius)
    elif args.command == "check-grads":
        results = pipeline.cmd_check_grads(args.out, args.seed)
        print(f"{len(results)} gradient checks passed")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except BevkitError as exc:
        print(f"bevkit: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
