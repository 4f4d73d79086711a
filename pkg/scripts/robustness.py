#!/usr/bin/env python3
"""Feature-noise robustness trend: full model vs flat ablation over several seeds."""

import argparse
import json

from hikersgg.experiments import robustness_seed, robustness_summary


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--sigmas", default="0.5,1.0", help="noise scales as multiples of prototype separation")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--margin", type=float, default=2.0)
    ap.add_argument("--json", help="write every run here as JSON")
    args = ap.parse_args()

    sigmas = tuple(float(s) for s in args.sigmas.split(","))
    runs = []
    for seed in range(args.seeds):
        r = robustness_seed(seed, sigmas, args.epochs)
        runs.append(r)
        for name, res in r["models"].items():
            cells = "  ".join(f"{lab}: mR@20 {v['mR@20 C']:.1f} hops {[round(v['hops'][h], 1) for h in (1, 2, 3)]}"
                              for lab, v in res.items())
            print(f"seed {seed}  {name:16s} {cells}")
    s = robustness_summary(runs, sigmas[-1], args.margin)
    print(json.dumps({k: v for k, v in s.items() if k != "rows"}, indent=1))
    for row in s["rows"]:
        print(f"seed {row['seed']}: degradation full {row['deg_full']:.1f}%  flat {row['deg_flat']:.1f}%")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"runs": runs, "summary": s}, fh, indent=1, default=str)


if __name__ == "__main__":
    main()
