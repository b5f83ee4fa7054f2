"""Command line entry point: ``relmimic {demo-record,train,eval,report}``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .env import ENV_ID, HORIZON, record_demos, save_demos
from .metrics import emit_report
from .trainer import (
    VARIANTS,
    TrainConfig,
    evaluate,
    format_config,
    load_config,
    load_policy,
    parse_overrides,
    run_training,
)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _seed_list(text: str) -> str:
    try:
        [int(s) for s in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    return text


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="relmimic", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("demo-record", help="record scripted-expert demonstrations")
    d.add_argument("--env", default=ENV_ID, choices=[ENV_ID])
    d.add_argument("--n", type=_positive_int, default=8)
    d.add_argument("--seed", type=int, default=500_000)
    d.add_argument("--resolution", type=_positive_int, default=32)
    d.add_argument("--horizon", type=_positive_int, default=HORIZON)
    d.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run the imitation loop")
    t.add_argument("--config", help="flat key = value config file")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--k", type=_positive_int)
    t.add_argument("--variant", choices=sorted(VARIANTS))
    t.add_argument("--seeds", type=_seed_list)
    t.add_argument("--learners", type=_positive_int)
    t.add_argument("--iters", type=_positive_int)
    t.add_argument("--set", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")

    e = sub.add_parser("eval", help="evaluate a policy checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--config", help="config of the run (default: config.txt of the run directory)")
    e.add_argument("--episodes", type=_positive_int, default=10)

    r = sub.add_parser("report", help="write curve / CCDF CSVs of a run directory")
    r.add_argument("run_dir")
    r.add_argument("--no-plot", action="store_true")
    return p


def resolve_train_config(args) -> TrainConfig:
    base = load_config(args.config) if args.config else TrainConfig()
    pairs = dict(args.set)
    for flag, key in (("k", "k"), ("variant", "variant"), ("seeds", "seeds"),
                      ("learners", "n_learners"), ("iters", "i_max")):
        val = getattr(args, flag)
        if val is not None:
            pairs[key] = str(val)
    return parse_overrides(pairs, base)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "demo-record":
            demos = record_demos(args.n, args.seed, args.resolution, args.horizon)
            save_demos(demos, args.out)
            print(f"wrote {len(demos)} demonstrations to {args.out} "
                  f"(expert progress {demos.expert_score:.2f})")
        elif args.command == "train":
            cfg = resolve_train_config(args)
            summary = run_training(cfg, args.out)
            print(f"expert progress {summary['expert_score']:.2f}; "
                  f"final mean {summary.get('mean', float('nan')):.2f}; "
                  f"area under CCDF {summary.get('area', float('nan')):.2f}")
        elif args.command == "eval":
            ckpt = Path(args.checkpoint)
            cfg_path = Path(args.config) if args.config else ckpt.parent.parent / "config.txt"
            cfg = load_config(cfg_path)
            policy = load_policy(ckpt, cfg)
            scores = evaluate(policy, cfg.k, cfg.resolution, args.episodes, cfg.horizon)
            for i, s in enumerate(scores):
                print(f"episode {i}: {s:.3f}")
            print(f"mean {np.mean(scores):.3f}")
        elif args.command == "report":
            summary = emit_report(args.run_dir, plot=not args.no_plot)
            print(f"{summary['n_returns']} final returns; area {summary.get('area', float('nan')):.3f}")
    except (KeyError, ValueError, TypeError, FileNotFoundError) as exc:
        parser.print_usage(sys.stderr)
        print(f"relmimic: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
