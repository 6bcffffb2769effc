"""Command-line entry point: ``recrl {synth,prepare,train,evaluate,report}``.

Exit codes: 0 success, 2 bad input or data, 3 configuration or checkpoint
mismatch, 4 broken internal invariant.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from recrl.data import DATA_ROOT_ENV, coat_like_dataset, convert_coat, lowrank_dataset, save_dataset
from recrl.errors import ConfigError, InputError, RecRLError
from recrl import pipeline

log = logging.getLogger("recrl")

EXIT_OK, EXIT_INPUT, EXIT_CONFIG, EXIT_INTERNAL = 0, 2, 3, 4


def _load(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.parse_config(Path(args.config))
    if args.seed is not None:
        cfg.experiment = dataclasses.replace(cfg.experiment, seed=args.seed)
    return cfg


def cmd_synth(args) -> None:
    if args.from_coat:
        ds = convert_coat(args.from_coat)
    elif args.kind == "coat_like":
        ds = coat_like_dataset(seed=args.seed if args.seed is not None else 2023)
    else:
        ds = lowrank_dataset(args.n_users, args.n_items, rank=args.rank, noise=args.noise, density=args.density,
                             n_categories=args.n_categories, seed=args.seed or 0)
    path = save_dataset(ds, args.out or "data/" + ds.name)
    print(path)


def cmd_prepare(args) -> None:
    cfg = _load(args)
    metrics = pipeline.prepare(cfg, args.out)
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


def cmd_train(args) -> None:
    cfg = _load(args)
    summary = pipeline.train_stage(cfg, args.out)
    print(" ".join(f"{k}={v:.4f}" for k, v in summary.items()))


def cmd_evaluate(args) -> None:
    cfg = _load(args)
    r = pipeline.evaluate_stage(cfg, args.out, args.checkpoint)
    print(" ".join(f"{k}={v:.4f}" for k, v in r.row().items()))


def cmd_report(args) -> None:
    for p in pipeline.report(args.runs, args.out or "report", render=args.plot):
        print(p)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="recrl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def stage(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="experiment INI file")
        p.add_argument("--seed", type=int, help="override [experiment] seed")
        p.add_argument("--out", help="output directory (default: [experiment] out)")
        p.set_defaults(fn=fn)
        return p

    stage("prepare", cmd_prepare, "fit the user model and the evaluation completion model")
    stage("train", cmd_train, "train the policy; writes checkpoint, history and summary")
    ev = stage("evaluate", cmd_evaluate, "evaluate a policy checkpoint under the [eval] mode")
    ev.add_argument("--checkpoint", help="policy checkpoint (default: OUT/policy.ckpt)")

    rp = sub.add_parser("report", help="learning curves and the overestimation comparison")
    rp.add_argument("runs", nargs="+", help="run directories")
    rp.add_argument("--out", help="output directory (default: report)")
    rp.add_argument("--plot", action="store_true", help="also render PNG images (needs matplotlib)")
    rp.set_defaults(fn=cmd_report)

    sy = sub.add_parser("synth", help=f"write a synthetic dataset; relative configs resolve under ${DATA_ROOT_ENV}")
    sy.add_argument("--kind", choices=("coat_like", "lowrank"), default="coat_like")
    sy.add_argument("--from-coat", metavar="DIR", help="convert the original Coat files instead")
    sy.add_argument("--out")
    sy.add_argument("--seed", type=int)
    sy.add_argument("--n-users", type=int, default=100)
    sy.add_argument("--n-items", type=int, default=80)
    sy.add_argument("--rank", type=int, default=1)
    sy.add_argument("--noise", type=float, default=0.0)
    sy.add_argument("--density", type=float, default=0.5)
    sy.add_argument("--n-categories", type=int, default=0)
    sy.set_defaults(fn=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.fn(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RecRLError as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
