#!/usr/bin/env python3
"""Run the simulation grid behind the coverage/filter, type I, power and FDR/TPR tables.

Each block shells into ``posttest simulate`` so the CSV reports are exactly what
the CLI produces. Use ``--quick`` for a small smoke run.
"""
import argparse
import itertools
import sys
import time

from posttest.cli import main as posttest

LINKS = ("identity", "logit", "log")
METHODS = ("mcp", "scad", "adalasso")


def run(argv):
    t0 = time.perf_counter()
    code = posttest(argv)
    print(f"[{time.perf_counter() - t0:7.1f}s] exit {code}: {' '.join(argv)}", file=sys.stderr)
    return code


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="results")
    ap.add_argument("--reps", type=int, default=100)
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--tables", nargs="+", default=["table2", "table3", "table4", "table5"])
    ap.add_argument("--quick", action="store_true", help="5 replications, identity link, NU only")
    args = ap.parse_args()

    reps = 5 if args.quick else args.reps
    links = ("identity",) if args.quick else LINKS
    settings = ("nu",) if args.quick else ("nu", "mvn")
    common = ["--reps", str(reps), "--jobs", str(args.jobs), "--seed", str(args.seed), "--out", args.out]

    for table in args.tables:
        methods = METHODS + ("sst",) if table in ("table2", "table3", "table4") else METHODS
        for link, setting, method in itertools.product(links, settings, methods):
            argv = ["simulate", "--design", table, "--method", method, "--link", link,
                    "--setting", setting, "--trajectories"] + common
            run(argv)


if __name__ == "__main__":
    main()
