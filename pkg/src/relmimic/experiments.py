"""Desk-scale experiment protocols shared by the scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from .metrics import learning_curve, read_csv
from .trainer import VARIANTS, TrainConfig, load_config, run_training

DESK_CONFIG = Path(__file__).resolve().parents[2] / "scripts" / "configs" / "desk.txt"


def desk_config(path=None) -> TrainConfig:
    """The desk schedule; falls back to the same values if the file is absent."""
    path = Path(path) if path else DESK_CONFIG
    if path.exists():
        return load_config(path)
    return TrainConfig(variant="non-local-reward", n_learners=2, seeds=(0, 1, 2), c_max=256,
                       t_max=2, minibatch=32, disc_batch=32)


def imitation_ratio(run_dir, expert_score: float) -> dict:
    """Seed-averaged learning curve relative to the expert.

    ``best`` is the highest seed-mean evaluation score over the run,
    ``final`` the seed mean at the last evaluation.
    """
    curve = learning_curve(run_dir)
    if not curve:
        raise ValueError(f"no evaluation rows under {run_dir}")
    means = np.array([m for _, m, _, _ in curve])
    cpu = sum(float(read_csv(p)[-1]["cpu_seconds"])
              for p in sorted(Path(run_dir).glob("seed_*/timing.csv")))
    return {
        "expert": expert_score,
        "best": float(means.max() / expert_score),
        "final": float(means[-1] / expert_score),
        "best_iteration": int(curve[int(means.argmax())][0]),
        "cpu_seconds": cpu,
        "curve": curve,
    }


def desk_imitation(run_dir, cfg: TrainConfig | None = None, log=print) -> dict:
    """Full run plus the frozen-reward ablation (``d_max = 0``) on the same seeds."""
    cfg = cfg or desk_config()
    run_dir = Path(run_dir)
    full = run_training(cfg, run_dir / "full", log=log)
    ablation_cfg = dataclasses.replace(cfg, d_max=0,
                                       demo_path=str(run_dir / "full" / "demos.rmd"))
    run_training(ablation_cfg, run_dir / "ablation", log=log)
    return {
        "full": imitation_ratio(run_dir / "full", full["expert_score"]),
        "ablation": imitation_ratio(run_dir / "ablation", full["expert_score"]),
    }


def all_variants(run_dir, cfg: TrainConfig, log=print) -> dict[str, dict]:
    """Run every network variant with the same schedule; returns each run summary."""
    run_dir = Path(run_dir)
    out = {}
    demo_path = cfg.demo_path
    for name in VARIANTS:
        vcfg = dataclasses.replace(cfg, variant=name, demo_path=demo_path)
        out[name] = run_training(vcfg, run_dir / name, log=log)
        if not demo_path:
            demo_path = str(run_dir / name / "demos.rmd")
    return out
