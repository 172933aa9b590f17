"""Command line: ``bhivae train|eval|traverse|gen-data``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, parse_config
from .data import Dataset, IdxFormatError, export_dataset, gen_minidsprites, load_dataset_dir, load_idx, specs_from_json
from .ndgrad import ShapeError
from .train import TrainingError, emit_traversal, evaluate, train, write_trace

log = logging.getLogger("bhivae")


def _load_any(path) -> Dataset:
    """A ``gen-data`` output directory or a bare IDX image file."""
    path = Path(path)
    if path.is_dir():
        return load_dataset_dir(path)
    return load_idx(path)


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    stem = Path(args.config).with_suffix("")
    ckpt_path, trace_path = stem.with_suffix(".ckpt"), Path(f"{stem}.trace.jsonl")

    def progress(rec):
        log.info("step %d total %.4f", rec["step"], rec["total"])

    result = train(cfg, on_step=progress)
    save_checkpoint(result.checkpoint, ckpt_path)
    write_trace(result.trace, trace_path)
    print(json.dumps({"checkpoint": str(ckpt_path), "trace": str(trace_path), "steps": cfg.total_steps}))
    return 0


def cmd_eval(args) -> int:
    report = evaluate(load_checkpoint(args.ckpt), _load_any(args.dataset))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_traverse(args) -> int:
    tiles = emit_traversal(load_checkpoint(args.ckpt), args.sample, args.steps, args.out)
    print(json.dumps({"out": args.out, "height": tiles.shape[0], "width": tiles.shape[1]}))
    return 0


def cmd_gen_data(args) -> int:
    specs, resolution = specs_from_json(json.loads(Path(args.spec).read_text()))
    ds = gen_minidsprites(specs, resolution)
    export_dataset(ds, args.out)
    print(json.dumps({"out": args.out, "images": len(ds), "factors": list(ds.factors.names)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bhivae", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model; writes <config>.ckpt and <config>.trace.jsonl")
    p.add_argument("config")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="print a JSON metric report")
    p.add_argument("ckpt")
    p.add_argument("dataset", help="gen-data output directory or IDX image file")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("traverse", help="write a PGM traversal grid")
    p.add_argument("ckpt")
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_traverse)

    p = sub.add_parser("gen-data", help="render mini-dSprites to an IDX directory")
    p.add_argument("spec")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, IdxFormatError, ShapeError, TrainingError, IndexError, ValueError, OSError) as e:
        print(f"bhivae {args.command}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
