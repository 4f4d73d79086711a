#!/usr/bin/env python3
"""Sweep the transition blend weight and print a UC/C mean-recall table."""

import argparse

from hikersgg.evaluation import table_csv
from hikersgg.experiments import comparison_rows, format_table, run_alpha_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alphas", default="0.5,0.8,0.9,0.95,0.99")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--csv")
    args = ap.parse_args()

    alphas = tuple(float(a) for a in args.alphas.split(","))
    rows = comparison_rows(run_alpha_sweep(alphas, args.seed, args.epochs))
    print(format_table(rows))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(table_csv(rows))


if __name__ == "__main__":
    main()
