#!/usr/bin/env python3
"""Regenerate the bundled fixtures (goldens, transition matrix, tiny files) and their manifest.

Only run this after an intentional change to a corruption procedure or fixture
recipe; the test suite compares against the committed bytes.
"""

import argparse

from hikersgg.fixtures import FIXTURE_DIR, generate_fixtures, verify_fixtures


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--root", default=str(FIXTURE_DIR))
    ap.add_argument("--check", action="store_true", help="only verify, exit 1 on any mismatch")
    args = ap.parse_args()
    if not args.check:
        for name, e in generate_fixtures(args.root).items():
            print(f"{e['sha256'][:12]}  {e['provenance']:8s} {name}")
    rep = verify_fixtures(args.root)
    if not rep.ok:
        print("offending:", ", ".join(rep.offending()))
        raise SystemExit(1)
    print(f"{len(rep.checked)} fixtures verified")


if __name__ == "__main__":
    main()
