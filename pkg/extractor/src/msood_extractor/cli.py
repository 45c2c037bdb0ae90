"""Command-line entry point: dataset manifest in, embedding bundle out."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ExtractorError
from .extract import ExtractSpec, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msood-extract",
        description="Encode a labeled image dataset into a multi-scale "
                    "embedding bundle.",
    )
    parser.add_argument("manifest",
                        help="CSV or JSON dataset manifest (path + label per row)")
    parser.add_argument("--out", required=True, help="output bundle directory")
    parser.add_argument("--classes", required=True,
                        help="comma-separated class names, in label order")
    parser.add_argument("--n", type=int, default=2, help="partition factor")
    parser.add_argument("--encoder", default="clip-vit-b16",
                        help="encoder identifier (toy-<d>, clip-vit-b16, "
                             "clip-vit-b32)")
    parser.add_argument("--template", default="a photo of a [class]",
                        help="prompt template with one [class] placeholder")
    parser.add_argument("--batch-size", type=int, default=16,
                        help="views per encoder call")
    parser.add_argument("--d", type=int, default=None,
                        help="required embedding width; mismatching encoders "
                             "are rejected")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    class_names = [name.strip() for name in args.classes.split(",") if name.strip()]
    try:
        spec = ExtractSpec(
            manifest=args.manifest,
            out=args.out,
            class_names=class_names,
            n=args.n,
            encoder=args.encoder,
            template=args.template,
            batch_size=args.batch_size,
            expected_d=args.d,
        )
        report = extract(spec)
    except ExtractorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    skipped = f", {len(report.skipped)} skipped" if report.skipped else ""
    print(
        f"wrote bundle to {report.out}: {report.written} items{skipped}, "
        f"d={report.d}, n={report.n}, classes={len(class_names)}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
