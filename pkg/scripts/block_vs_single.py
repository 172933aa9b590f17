"""Compare a 2-wide and a 1-wide first feature block on one factor.

    python3 scripts/block_vs_single.py --factor scale --steps 2000
"""
import argparse
import json

from bhivae.experiments import block_vs_single


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--factor", default="scale")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    print(json.dumps(block_vs_single(args.steps, args.seed, args.factor), indent=2))


if __name__ == "__main__":
    main()
