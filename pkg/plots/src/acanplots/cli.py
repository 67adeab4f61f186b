"""Entry points: ``plot-loss <csv> <png>`` and ``plot-perf <csv> <png>``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

from .figures import FigureError, FigureSpec, render


def _run(prog: str, kind: str, argv: Optional[list[str]]) -> int:
    parser = argparse.ArgumentParser(prog=prog)
    parser.add_argument("csv", help="input CSV written by the simulator CLI")
    parser.add_argument("png", help="output image path")
    args = parser.parse_args(argv)
    try:
        label = render(FigureSpec(Path(args.csv), kind, Path(args.png)))
    except (FigureError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    suffix = f"  ({label})" if label else ""
    print(f"wrote {args.png}{suffix}")
    return 0


def main_loss(argv: Optional[list[str]] = None) -> int:
    return _run("plot-loss", "loss-curve", argv)


def main_perf(argv: Optional[list[str]] = None) -> int:
    return _run("plot-perf", "timeout-vs-power", argv)


if __name__ == "__main__":
    sys.exit(main_loss())
