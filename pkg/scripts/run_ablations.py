#!/usr/bin/env python3
"""Run every ablation axis (components, channels, sparse-count,
ccs-mode) with shared seeds and collect the tables under one directory."""

import argparse
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from promptseg.cli import ABLATION_AXES, main as cli_main


def parse_args():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--runs", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="runs/ablations")
    p.add_argument("--axes", default=",".join(ABLATION_AXES),
                   help="comma-separated subset of axes")
    return p.parse_args()


def main():
    args = parse_args()
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    for axis in axes:
        if axis not in ABLATION_AXES:
            print(f"unknown axis {axis!r}; choose from {ABLATION_AXES}", file=sys.stderr)
            return 2
    for axis in axes:
        argv = ["ablate", "--axis", axis, "--out", args.out]
        if args.config is not None:
            argv += ["--config", args.config]
        for flag, val in (("--steps", args.steps), ("--runs", args.runs),
                          ("--episodes", args.episodes), ("--seed", args.seed)):
            if val is not None:
                argv += [flag, str(val)]
        code = cli_main(argv)
        if code != 0:
            return code
    print(f"\nall tables under {args.out}/")
    return 0


if __name__ == "__main__":
    sys.exit(main())
