#!/usr/bin/env python3
"""Run the seven ablation configurations and print a UC/C mean-recall table."""

import argparse

from hikersgg.evaluation import table_csv
from hikersgg.experiments import comparison_rows, format_table, run_ablation


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args()

    rows = comparison_rows(run_ablation(args.seed, args.epochs))
    print(format_table(rows))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(table_csv(rows))


if __name__ == "__main__":
    main()
