"""Command line entry: ``render_report <run_dir> --out <dir>``.

Renders whatever the run directory provides: weight-map heatmap panels
when PGMs are present, comparison curves when compare.csv is present.
Missing optional artifacts are skipped with a warning; producing nothing
at all is an error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .artifacts import ArtifactError, RunArtifacts
from .render import render_curves, render_heatmaps

logger = logging.getLogger(__name__)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="render_report",
                                     description="render report figures from a run directory")
    parser.add_argument("run_dir", help="run directory (searched recursively for artifacts)")
    parser.add_argument("--out", required=True, help="output directory for PNGs")
    args = parser.parse_args(argv)

    try:
        artifacts = RunArtifacts.discover(args.run_dir)
    except ArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = 0

    if artifacts.weight_pgms:
        try:
            files = render_heatmaps(args.run_dir, out_dir)
            rendered += len(files)
        except ArtifactError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1
    else:
        logger.warning("no weight-map PGMs found; skipping heatmap panels")

    if artifacts.compare_csv is not None:
        try:
            render_curves(artifacts.compare_csv, out_dir / "curves.png")
            rendered += 1
        except ArtifactError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1
    else:
        logger.warning("no compare.csv found; skipping comparison curves")

    if rendered == 0:
        print(f"error: nothing to render under {args.run_dir}", file=sys.stderr)
        return 1
    print(f"wrote {rendered} file(s) to {out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
