"""Estimate the mutual information of a correlated Gaussian pair with the
permutation discriminator and compare against the closed form."""
import argparse
import json

from bhivae.experiments import tc_discriminator_check


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rho", type=float, default=0.5)
    ap.add_argument("--seeds", type=int, default=3)
    args = ap.parse_args()
    for seed in range(args.seeds):
        print(json.dumps({"seed": seed, **tc_discriminator_check(rho=args.rho, seed=seed)}))


if __name__ == "__main__":
    main()
