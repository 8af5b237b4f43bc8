"""Command line entry point: ``python -m shuffleblock <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiments
from .config import ConfigError, load_config


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, type=Path, help="run config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", type=Path, help="override the output directory")


def build_parser():
    ap = argparse.ArgumentParser(prog="shuffleblock", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train MiniResNet and write metrics.csv + checkpoint"))

    p = sub.add_parser("evaluate", help="test loss/accuracy of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("ablate-block-size", help="block_size sweep (0 = off, channel, channel-reverse)")
    _common(p)
    p.add_argument("--sizes", required=True, help="comma list, e.g. 0,1,2,3,channel,channel-reverse")
    p.add_argument("--seeds", help="comma list overriding the config seeds")

    p = sub.add_parser("ablate-ch-frac", help="constant ch_frac sweep at block_size 3")
    _common(p)
    p.add_argument("--fracs", required=True, help="comma list, e.g. 0,0.1,0.2,0.4,0.5")
    p.add_argument("--seeds", help="comma list overriding the config seeds")

    p = sub.add_parser("cam", help="write a class activation map as a 32x32 PGM")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--index", type=int, required=True, help="test image index")
    p.add_argument("--class-id", help="class index, or 'predicted' (default)")

    p = sub.add_parser("selftest", help="run the property suite")
    p.add_argument("--cases", type=int, default=10_000)
    p.add_argument("--corrupt-permutation", action="store_true", help=argparse.SUPPRESS)
    return ap


def _seeds(s):
    return [int(v) for v in s.split(",")] if s else None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_selftest

            results = run_selftest(args.cases, corrupt_permutation=args.corrupt_permutation)
            failed = sum(not r.passed for r in results)
            print(f"{len(results) - failed}/{len(results)} properties passed")
            return 1 if failed else 0

        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        if args.command == "train":
            recs = experiments.train(cfg)
            last = recs[-1] if recs else None
            print(f"wrote {cfg.output_dir / 'metrics.csv'}"
                  + (f" (final test_acc {last.test_acc:.4f})" if last else ""))
        elif args.command == "evaluate":
            loss, acc = experiments.evaluate_checkpoint(cfg, args.checkpoint)
            print(f"test_loss {loss!r} test_acc {acc!r}")
        elif args.command == "ablate-block-size":
            sizes = [s.strip() for s in args.sizes.split(",") if s.strip()]
            experiments.ablate_block_size(cfg, sizes, _seeds(args.seeds))
            print(f"wrote {cfg.output_dir / 'summary.csv'}")
        elif args.command == "ablate-ch-frac":
            fracs = [float(s) for s in args.fracs.split(",") if s.strip()]
            experiments.ablate_ch_frac(cfg, fracs, _seeds(args.seeds))
            print(f"wrote {cfg.output_dir / 'summary.csv'}")
        elif args.command == "cam":
            cid = None if args.class_id in (None, "predicted") else int(args.class_id)
            path, cls = experiments.cam_to_pgm(cfg, args.checkpoint, args.index, cid)
            print(f"wrote {path} (class {cls})")
    except (ConfigError, ValueError, OSError, IndexError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
