"""Command line for feature extraction.

Exit codes match the main toolkit: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from reprloc.featstore import DataError, validate_dataset

from .backbones import BackboneError
from .extract import MODES, ExtractSpec, extract


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> _Parser:
    parser = _Parser(prog="reprloc-extract", description=__doc__)
    parser.add_argument("--images", required=True, type=Path)
    parser.add_argument("--backbone", required=True)
    parser.add_argument("--mode", required=True, choices=sorted(MODES))
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--split", choices=("train", "test"), default="train")
    parser.add_argument("--checkpoint", type=Path, default=None)
    parser.add_argument("--untrained", action="store_true",
                        help="randomly initialized backbone (smoke runs)")
    parser.add_argument("--batch-size", type=int, default=4)
    parser.add_argument("--skip-validation", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        spec = ExtractSpec(
            image_dir=args.images,
            backbone=args.backbone,
            mode=args.mode,
            out_dir=args.out,
            split=args.split,
            checkpoint=args.checkpoint,
            untrained=args.untrained,
            batch_size=args.batch_size,
        )
        manifest = extract(spec)
        if not args.skip_validation:
            report = validate_dataset(manifest)
            if not report.ok:
                for failure in report.failures:
                    print(f"validation: {failure.image_id}: {failure.message}",
                          file=sys.stderr)
                return 2
        print(f"extracted {len(manifest.entries)} images to {args.out}")
        return 0
    except (DataError, BackboneError, FileNotFoundError) as exc:
        print(f"reprloc-extract: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
