"""``tripletsv`` command line.

Every failure ends with one ``category: message`` line on stderr and a nonzero exit.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import load_config
from .errors import MissingArtifactError, TripletSVError
from .trials import format_scores, write_scores

EXIT_ERROR = 1
EXIT_USAGE = 2


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the subcommand from being reset after it
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="INI config file")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--scale", type=float, default=argparse.SUPPRESS, help="network width scale factor")
    g.add_argument("--jobs", type=int, default=argparse.SUPPRESS, help="cap on BLAS worker threads")
    g.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="experiment root directory")
    g.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="tripletsv", parents=[common],
                                     description="Speaker verification with triplet and similarity training.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    add("gen-data", "synthesise train/eval corpora and the eval trial list")
    add("featurize", "MFCC + VAD + CMN features for both corpora")
    for name, help_ in (("train", "train x-vector systems"), ("extract", "extract embeddings"),
                        ("score", "score the eval trials"), ("report", "write report, DET curves, histograms")):
        p = add(name, help_)
        p.add_argument("--system", action="append", metavar="ID",
                       help="system id such as 2 or sys4 (repeatable; default: all configured)")
    p = add("evaluate", "EER and DCF16 per system and condition")
    p.add_argument("scores", nargs="*", type=Path, help="score files (default: configured systems)")
    p.add_argument("--trials", type=Path, help="keyed trial list (default: the generated eval trials)")
    p.add_argument("--report-csv", type=Path, help="where to write the report CSV")
    p.add_argument("--system", action="append", metavar="ID")
    p = add("fuse", "equal-weight (or weighted) z-norm fusion of score files")
    p.add_argument("scores", nargs="+", type=Path)
    p.add_argument("--weights", type=float, nargs="+")
    p.add_argument("--output", "-o", type=Path, help="output score file (default: stdout)")
    p.add_argument("--name", default="fusion")
    add("run-all", "whole pipeline over the system grid")
    return parser


def _config(args):
    overrides = {
        ("experiment", "seed"): getattr(args, "seed", None),
        ("experiment", "scale"): getattr(args, "scale", None),
        ("experiment", "jobs"): getattr(args, "jobs", None),
        ("paths", "out"): str(args.out) if getattr(args, "out", None) is not None else None,
    }
    return load_config(getattr(args, "config", None), overrides=overrides)


def _systems(cfg, args, trained_only=False):
    systems = pipeline.selected_systems(cfg, getattr(args, "system", None))
    return [s for s in systems if s.trained] if trained_only else systems


def _check_inputs(paths):
    for p in paths:
        if not p.is_file():
            raise MissingArtifactError(f"{p} not found")


def run(args) -> int:
    cfg = _config(args)
    cmd = args.command
    # resolve every input named on the command line before touching the disk
    if cmd == "fuse":
        _check_inputs(args.scores)
    if cmd == "evaluate" and args.scores:
        _check_inputs(args.scores + [args.trials or pipeline.trials_path(cfg)])
    with threadpool_limits(limits=cfg.jobs):
        if cmd == "gen-data":
            for k, p in pipeline.gen_data(cfg).items():
                print(f"{k}: {p}")
        elif cmd == "featurize":
            for split, n in pipeline.featurize(cfg).items():
                print(f"{split}: {n} utterances")
        elif cmd == "train":
            data = pipeline.load_split(cfg, "train")
            for s in _systems(cfg, args, trained_only=True):
                print(f"{s.name}: {pipeline.train_system(cfg, s, data)}")
        elif cmd == "extract":
            data = {split: pipeline.load_split(cfg, split) for split in pipeline.SPLITS}
            for s in _systems(cfg, args, trained_only=True):
                print(f"{s.name}: {pipeline.extract_system(cfg, s, data)['eval']}")
        elif cmd == "score":
            for s in _systems(cfg, args):
                print(f"{s.name}: {pipeline.score_system(cfg, s)}")
        elif cmd == "evaluate":
            if args.scores:
                rows = pipeline.evaluate_files(args.scores, args.trials or pipeline.trials_path(cfg))
                csv_path = args.report_csv or cfg.path("reports") / "report.csv"
                csv_path.parent.mkdir(parents=True, exist_ok=True)
                csv_path.write_text(pipeline.report_csv(rows))
            else:
                rows = pipeline.evaluate_systems(cfg, _systems(cfg, args))
            sys.stdout.write(pipeline.format_rows(rows))
        elif cmd == "fuse":
            fused = pipeline.fuse_files(args.scores, args.weights, args.name)
            if args.output:
                write_scores(args.output, fused)
            else:
                sys.stdout.write(format_scores(fused))
        elif cmd == "report":
            paths = pipeline.report(cfg, _systems(cfg, args))
            sys.stdout.write(paths["comparison"].read_text())
        elif cmd == "run-all":
            paths = pipeline.run_all(cfg)
            sys.stdout.write(paths["comparison"].read_text())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(getattr(args, "verbose", 0) or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return run(args)
    except TripletSVError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
