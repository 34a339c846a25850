"""Command-line entry point.

Subcommands map onto pipeline stages: `run` executes everything, the rest
rerun individual stages against an existing output directory. Exit codes:
0 success, 1 usage error, 2 data/config error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .container import DataFormatError
from .csvio import read_prediction_table, write_prediction_table
from .detector import roc_curve, write_roc_csv
from .models import load_checkpoint, predict_dataset
from .pipeline import (
    ConfigError,
    StageError,
    load_config,
    load_split,
    run_stages,
    STAGE_ORDER,
)
from .report import MissingArtifacts

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_STAGE = 3

_STAGE_COMMANDS = {
    "run": STAGE_ORDER,
    "train": ["data", "train"],
    "conductance": ["conductance"],
    "detect": ["detector"],
    "mutate": ["mutants"],
    "lcr": ["lcr"],
    "combine": ["unified", "verdicts"],
    "report": ["report"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="misfire",
                     description="flag likely-wrong CNN predictions from "
                                 "conductance patterns and mutation stability")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_stage_cmd(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override every component seed from this master value")
        p.add_argument("--resume", action="store_true",
                       help="skip stages whose artifacts are already intact")
        return p

    add_stage_cmd("run", "execute the full pipeline")
    add_stage_cmd("train", "generate/split the dataset and train the CNN")
    add_stage_cmd("conductance", "compute conductance vectors for every split")
    add_stage_cmd("detect", "train the conductance error detector")
    add_stage_cmd("mutate", "build the validated mutant population")
    add_stage_cmd("lcr", "compute label change rates for every split")
    add_stage_cmd("combine", "train unified classifiers and judge the test set")
    p = sub.add_parser("report", help="render tables and figures from a finished run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", action="store_true")

    p = sub.add_parser("predict", help="write prediction records for one split")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")

    p = sub.add_parser("roc", help="compute a ROC curve from a score table CSV")
    p.add_argument("--scores", required=True, help="prediction table with a score column")
    p.add_argument("--out", required=True, help="directory for roc.csv")
    return parser


def _cmd_predict(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out)
    ckpt_path = out / "checkpoint.bin"
    if not ckpt_path.exists():
        raise StageError("predict", f"no checkpoint at {ckpt_path}; run training first")
    ckpt = load_checkpoint(ckpt_path)
    ds = load_split(cfg, out, args.split)
    records = predict_dataset(ckpt, ds)
    dest = out / f"predictions_{args.split}.csv"
    write_prediction_table(
        dest,
        [r.sample_id for r in records],
        [r.true_class for r in records],
        [r.predicted_class for r in records],
        [r.is_wrong for r in records],
        {"softmax_score": np.array([r.softmax_score for r in records])},
    )
    print(f"wrote {dest}")
    return EXIT_OK


def _cmd_roc(args) -> int:
    ids, _, _, wrong, cols = read_prediction_table(args.scores)
    if len(cols) != 1:
        raise ValueError(f"{args.scores}: expected exactly one score column, "
                         f"found {sorted(cols)}")
    (values,) = cols.values()
    roc = roc_curve(values, wrong)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    dest = outdir / "roc.csv"
    write_roc_csv(dest, roc)
    print(f"AUROC {roc.auroc:.6f}; wrote {dest}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "predict":
            return _cmd_predict(args)
        if args.command == "roc":
            return _cmd_roc(args)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.override_seed(args.seed)
        manifest = run_stages(cfg, args.out, _STAGE_COMMANDS[args.command],
                              resume=args.resume)
        done = ", ".join(s for s in manifest.stages)
        print(f"completed stages: {done}")
        print(f"manifest: {Path(args.out) / 'manifest.json'}")
        return EXIT_OK
    except (ConfigError, DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MissingArtifacts as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except StageError as exc:
        print(f"stage failure: {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    raise SystemExit(main())
