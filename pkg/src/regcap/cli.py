"""``regcap`` command line: train, eval, caption, heatmap, ablate, plus a synthetic-data generator.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import resolve
from .errors import ConfigError, ContractError, DataError, NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _run_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one key (repeatable)")
    p.add_argument("--out", default="runs/default", help="output directory")
    p.add_argument("--seed", type=int, help="train a single seed instead of train.seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regcap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per seed and aggregate")
    _run_flags(p)

    p = sub.add_parser("eval", help="decode a split and compute the metric suite")
    _run_flags(p)
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("caption", help="caption PGM/PPM images with a trained checkpoint")
    _run_flags(p)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("heatmap", help="render an alpha JSON row as a PGM heatmap")
    p.add_argument("alpha_json")
    p.add_argument("image")
    p.add_argument("--out", required=True, help="output PGM path")
    p.add_argument("--overlay", help="optional PPM path for a 50/50 overlay")
    p.add_argument("--index", type=int, default=0, help="row of the alpha document")

    p = sub.add_parser("ablate", help="train and compare regional-attention arms")
    _run_flags(p)
    p.add_argument("--split", choices=("train", "val", "test"))

    p = sub.add_parser("synth", help="write the synthetic shapes corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    return parser


def _resolve(args):
    overrides = list(args.set)
    if getattr(args, "split", None):
        overrides.append(f"run.split={args.split}")
    return resolve(args.config, overrides, args.out, args.seed)


def dispatch(args) -> int:
    from . import pipeline

    if args.command == "synth":
        from .synth import generate_dataset

        info = generate_dataset(args.out, args.train, args.val, args.test, args.seed)
        print(json.dumps({"manifest": info["manifest"], "vocab": info["vocab"], "entries": len(info["entries"])}))
    elif args.command == "heatmap":
        from .heatmap import export_heatmap

        print(export_heatmap(args.alpha_json, args.image, args.out, args.overlay, args.index))
    elif args.command == "train":
        result = pipeline.run_train(_resolve(args))
        print(json.dumps(result["best_val_loss"]))
    elif args.command == "eval":
        result = pipeline.run_eval(_resolve(args))
        print(result["report"].to_table(), end="")
    elif args.command == "caption":
        for path, cap in zip(args.images, pipeline.run_caption(_resolve(args), args.images)):
            print(f"{path}\t{cap.text}")
    elif args.command == "ablate":
        report = pipeline.run_ablation(_resolve(args))
        print(pipeline.ablation_table(report), end="")
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
