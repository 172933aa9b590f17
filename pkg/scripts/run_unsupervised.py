"""Train the unsupervised model and compare its code with the untrained one.

    python3 scripts/run_unsupervised.py --steps 5000 --out runs/unsupervised
"""
import argparse
import json
import time
from pathlib import Path

from bhivae.checkpoint import save_checkpoint
from bhivae.experiments import desk_dataset, unsupervised_config, unsupervised_report
from bhivae.train import train, write_trace


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=None, help="directory for checkpoint and trace")
    args = ap.parse_args()

    t0 = time.perf_counter()
    result = train(unsupervised_config(total_steps=args.steps, seed=args.seed), desk_dataset())
    report = unsupervised_report(result)
    report["seconds"] = time.perf_counter() - t0
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.checkpoint, args.out / "model.ckpt")
        write_trace(result.trace, args.out / "trace.jsonl")
    print(json.dumps(report, indent=2))


if __name__ == "__main__":
    main()
