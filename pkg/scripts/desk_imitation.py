"""End-to-end desk imitation run and its frozen-reward ablation.

    python scripts/desk_imitation.py runs/desk [--config scripts/configs/desk.txt]
"""

import argparse
import json

from relmimic.experiments import desk_config, desk_imitation


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out")
    ap.add_argument("--config")
    args = ap.parse_args()
    res = desk_imitation(args.out, desk_config(args.config), log=lambda m: print(m, flush=True))
    for name, r in res.items():
        print(f"{name}: best {r['best']:.1%} of expert at iteration {r['best_iteration']}, "
              f"final {r['final']:.1%}, cpu {r['cpu_seconds'] / 60:.1f} min")
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "curve"} for k, v in res.items()}
    with open(f"{args.out}/imitation.json", "w") as fh:
        json.dump(summary, fh, indent=2)


if __name__ == "__main__":
    main()
