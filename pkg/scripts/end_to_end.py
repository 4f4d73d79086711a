#!/usr/bin/env python3
"""Train the full model on the default synthetic set and report loss drop and leaf accuracy."""

import argparse
import json

from hikersgg.experiments import desk_train_config, run_end_to_end


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--json", help="write the summary here as JSON")
    args = ap.parse_args()

    r = run_end_to_end(args.seed, train_config=desk_train_config(seed=args.seed, epochs=args.epochs))
    for e in r["report"].epochs:
        print(f"epoch {e.epoch:3d}  loss {e.total:.4f}")
    summary = {k: r[k] for k in ("loss_first", "loss_last", "loss_drop", "train_accuracy", "test_accuracy",
                                 "wall_time")}
    print(json.dumps(summary, indent=1))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary, fh, indent=1)


if __name__ == "__main__":
    main()
