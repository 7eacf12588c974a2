"""``mdal`` command line: gen, meta-train, adapt, eval, compare."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, online
from .errors import MDALError

log = logging.getLogger("mdal")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config JSON (default: bundled reference config)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--replicates", type=int, help="number of replicate seeds (default from config, 5)")
    p.add_argument("--data", type=Path, help="dataset root (overrides data_root)")
    p.add_argument("--out", type=Path, help="output root or directory (overrides out_dir)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mdal", description="Meta-learned step sizes and gated online adaptation "
                                 "for video segmentation on synthetic video.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="render the source and target datasets")
    _common(p)

    p = sub.add_parser("meta-train", help="train the meta-learner (or the plain baseline with --mode base)")
    _common(p)
    p.add_argument("--mode", choices=("meta", "base"), default="meta")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--replicate", type=int, action="append", help="train only these replicate indices")

    p = sub.add_parser("adapt", help="adapt to every target video and write predictions, traces, reports")
    _common(p)
    p.add_argument("--strategy", choices=online.STRATEGIES)
    p.add_argument("--K", type=int, help="first-frame iterations")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--checkpoint", type=Path, help="explicit checkpoint path")
    p.add_argument("--domain", action="append", help="restrict to these target domains")

    p = sub.add_parser("eval", help="score stored prediction masks against ground truth")
    _common(p)
    p.add_argument("--pred", type=Path, required=True, help="directory written by `mdal adapt`")

    p = sub.add_parser("compare", help="strategy x K grid over replicates, written as summary tables")
    _common(p)
    p.add_argument("--strategies", nargs="+", choices=online.STRATEGIES)
    p.add_argument("--K", type=int, nargs="+", dest="K_list")
    p.add_argument("--no-timing-reference", action="store_true",
                   help="skip the long first-frame fine-tuning row used for the cost comparison")
    return ap


def _config(args: argparse.Namespace, out_is_root: bool) -> harness.RunConfig:
    cfg = harness.RunConfig.load(args.config)
    return cfg.with_overrides(seed=args.seed, replicates=args.replicates, data_root=args.data,
                              out_dir=args.out if out_is_root else None)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gen":
            cfg = _config(args, out_is_root=False)
            if args.out is not None:
                cfg = cfg.with_overrides(data_root=args.out)
            for row in harness.gen(cfg, force=args.force):
                print(f"{row['domain']:<8} {row['videos']:>3} videos  T={row['frames']}  {row['size']}  "
                      f"seed={row['seed']}  -> {row['path']}")
        elif args.command == "meta-train":
            cfg = _config(args, out_is_root=True)
            for path in harness.train(cfg, args.mode, args.replicate, resume=args.resume, force=args.force):
                print(path)
        elif args.command == "adapt":
            cfg = _config(args, out_is_root=False)
            summary = harness.adapt(cfg, args.strategy, args.K, args.replicate, args.checkpoint,
                                    args.out, args.domain, force=args.force)
            print(json.dumps(summary, indent=2, sort_keys=True))
        elif args.command == "eval":
            cfg = _config(args, out_is_root=False)
            for name, rep in harness.evaluate_predictions(cfg, args.pred, args.out).items():
                print(f"{name:<8} IoU {rep.mean_iou:.4f}  Dice {rep.mean_dice:.4f}  ({len(rep.videos)} videos)")
        elif args.command == "compare":
            cfg = _config(args, out_is_root=False)
            out = args.out if args.out is not None else cfg.out_dir / "compare"
            harness.compare(cfg, args.strategies, args.K_list, out=out,
                            timing_reference=not args.no_timing_reference, force=args.force)
            print((out / "compare.txt").read_text(), end="")
    except MDALError as e:
        print(f"mdal {args.command}: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"mdal {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
