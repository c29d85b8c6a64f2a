"""plotkit command line: one figure per invocation."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from .figures import FIGURE_KINDS, FigureSpec, PlotkitError, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plotkit",
        description="Render a cascade evaluation report into a figure plus a plotted-series sidecar.",
    )
    parser.add_argument("--kind", choices=FIGURE_KINDS, required=True)
    parser.add_argument("--report", required=True, help="report JSON produced by the cascade harness")
    parser.add_argument("--out", required=True, help="output image path (.png, .svg, .pdf)")
    parser.add_argument("--title", default=None)
    parser.add_argument("--xlabel", default=None)
    parser.add_argument("--ylabel", default=None)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    spec = FigureSpec(
        kind=args.kind,
        report_path=args.report,
        out_path=args.out,
        title=args.title,
        xlabel=args.xlabel,
        ylabel=args.ylabel,
    )
    try:
        image_path, sidecar_path = render(spec)
    except PlotkitError as exc:
        print(f"plotkit: {exc}", file=sys.stderr)
        return 1
    print(f"figure   {image_path}")
    print(f"sidecar  {sidecar_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
