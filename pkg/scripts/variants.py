"""Run all four network variants with one schedule and print their CCDF areas.

    python scripts/variants.py runs/variants [--iters 300] [--seeds "0 1 2"]
"""

import argparse
import dataclasses

from relmimic.experiments import all_variants, desk_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--config")
    ap.add_argument("--iters", type=int)
    ap.add_argument("--seeds", help="space separated seed list")
    args = ap.parse_args()
    cfg = desk_config(args.config)
    if args.iters:
        cfg = dataclasses.replace(cfg, i_max=args.iters, eval_every=min(cfg.eval_every, args.iters))
    if args.seeds:
        cfg = dataclasses.replace(cfg, seeds=tuple(int(s) for s in args.seeds.split()))
    res = all_variants(args.out, cfg, log=lambda m: print(m, flush=True))
    for name, summary in res.items():
        print(f"{name:18s} area {summary.get('area', float('nan')):8.3f}  "
              f"mean {summary.get('mean', float('nan')):8.3f}  expert {summary['expert_score']:.3f}")


if __name__ == "__main__":
    main()
