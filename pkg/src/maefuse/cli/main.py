"""``maefuse`` command-line entry point.

Exit codes: 0 success, 2 configuration or data error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..dataio import synth
from ..errors import MaefuseError, NonFiniteError
from .config import load_config
from .report import merge_reports
from .runner import effective_workers, run_classify, run_pretrain, run_segment

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

RUNNERS = {"pretrain": run_pretrain, "classify": run_classify, "segment": run_segment}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maefuse", description="MAE pretraining, probing and fused segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("pretrain", "masked-autoencoder pretraining"),
        ("classify", "few-shot linear probing on a frozen encoder"),
        ("segment", "MAE-FUnet / MAE-direct segmentation"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="TOML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. optim.lr=1e-3 (repeatable)")
        p.add_argument("--workers", type=int, default=None, help="parallel preprocessing threads")

    r = sub.add_parser("report", help="merge report CSVs into one CSV + Markdown table")
    r.add_argument("inputs", nargs="+", type=Path, help="report.csv files")
    r.add_argument("--out", required=True, type=Path, help="output directory")
    r.add_argument("--stem", default="report")

    s = sub.add_parser("synth", help="generate synthetic desk-scale datasets")
    s.add_argument("--kind", choices=("classification", "segmentation"), required=True)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--classes", default="hstripes,vstripes,checker", help="comma-separated texture names")
    s.add_argument("--tags", default="synthA", help="comma-separated dataset tags")
    s.add_argument("--slices", type=int, default=30, help="slices per class (classification) or per subject")
    s.add_argument("--subjects", type=int, default=2)
    s.add_argument("--num-classes", type=int, default=2, help="segmentation label classes incl. background")
    s.add_argument("--test-fraction", type=float, default=0.5, help="share of slices written to the test split")
    return parser


def run_synth(args) -> None:
    """Writes ``<out>/train`` and ``<out>/test`` splits with independent seeds."""
    if not 0 < args.test_fraction < 1:
        raise MaefuseError("--test-fraction must lie strictly between 0 and 1")
    n_test = max(1, round(args.slices * args.test_fraction))
    n_train = max(1, args.slices - n_test)
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 1)):
        if args.kind == "classification":
            path = synth.write_classification_set(
                args.out / split,
                classes=tuple(args.classes.split(",")),
                tags=tuple(args.tags.split(",")),
                slices_per_class=n,
                subjects=args.subjects,
                size=args.size,
                seed=2 * args.seed + offset,
            )
        else:
            path = synth.write_segmentation_set(
                args.out / split,
                subjects=args.subjects,
                slices_per_subject=n,
                size=args.size,
                num_classes=args.num_classes,
                seed=2 * args.seed + offset,
            )
        print(path)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            run_synth(args)
        elif args.command == "report":
            for p in merge_reports(args.inputs, args.out, args.stem):
                print(p)
        else:
            cfg = load_config(args.config, args.overrides, task=args.command)
            workers = effective_workers(args.workers if args.workers is not None else cfg.run.workers)
            result = RUNNERS[args.command](cfg, workers=workers)
            for p in result if isinstance(result, tuple) else (result,):
                print(p)
    except NonFiniteError as exc:
        print(f"maefuse: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MaefuseError, OSError) as exc:
        print(f"maefuse: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
