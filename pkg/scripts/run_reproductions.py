#!/usr/bin/env python3
"""Run the pinned reproduction presets and summarize their verdicts.

Each preset is executed with its full workload by default, writing
tables, plots, and a manifest under ``runs/<name>``.  Use ``--paths``
or ``--steps`` to downscale every preset for a quick smoke run, and
``--only`` to restrict to a subset.  The exit code is 0 only when every
check of every executed preset passed.
"""

import argparse
import sys
import time
from pathlib import Path

from bsdelab.cli import PRESET_NAMES, reproduce


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--only", action="append", choices=PRESET_NAMES, metavar="NAME",
        help="run only this preset (repeatable; default: all)",
    )
    parser.add_argument("--out", default="runs", help="root output directory (default runs/)")
    parser.add_argument("--format", dest="fmt", choices=("csv", "json"), default="csv")
    parser.add_argument("--seed", type=int, default=None, help="override every preset seed")
    parser.add_argument("--paths", type=int, default=None, help="override every path count")
    parser.add_argument("--steps", type=int, default=None, help="override every step count")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    names = args.only or list(PRESET_NAMES)
    failures = 0
    started = time.perf_counter()
    for name in names:
        out_dir = Path(args.out) / name
        manifest = reproduce(
            name, out_dir, fmt=args.fmt,
            seed=args.seed, paths=args.paths, steps=args.steps,
        )
        print(f"{name}  (seed {manifest.seed}, {manifest.wall_clock_seconds:.1f}s, {out_dir})")
        for row in manifest.verdicts:
            status = "PASS" if row["passed"] else "FAIL"
            print(f"  [{status}] {row['check']}: {row['detail']}")
        failures += 0 if manifest.all_passed else 1
    elapsed = time.perf_counter() - started
    verdict = "all passed" if failures == 0 else f"{failures} preset(s) failed"
    print(f"\n{len(names)} preset(s) in {elapsed:.1f}s: {verdict}")
    return 0 if failures == 0 else 1


if __name__ == "__main__":
    sys.exit(main())
