"""Survival-function (CCDF) summaries and CSV / SVG reporting."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class CCDFReport:
    thresholds: np.ndarray
    survival: np.ndarray
    area: float


def ccdf(returns) -> CCDFReport:
    """Empirical ``P(R >= threshold)`` at 0 and every distinct return.

    The area is the trapezoid-free exact integral of the step function over
    ``[0, max(R)]``, which for non-negative returns equals their mean.
    """
    r = np.sort(np.asarray(returns, dtype=np.float64))
    if r.size == 0:
        raise ValueError("ccdf needs at least one return")
    thresholds = np.unique(np.concatenate([[0.0], r]))
    survival = np.array([np.mean(r >= t) for t in thresholds])
    return CCDFReport(thresholds, survival, area_under_ccdf_steps(thresholds, survival, r))


def area_under_ccdf_steps(thresholds, survival, r) -> float:
    # survival is left-continuous: on (t_i, t_{i+1}] it equals survival[i + 1]
    area = 0.0
    for i in range(len(thresholds) - 1):
        lo, hi = thresholds[i], thresholds[i + 1]
        if hi <= 0:
            continue
        area += (hi - max(lo, 0.0)) * survival[i + 1]
    return float(area)


def area_under_ccdf(report: CCDFReport) -> float:
    return report.area


def survival_at(report: CCDFReport, threshold: float) -> float:
    """Survival for an arbitrary threshold (0 beyond the largest return)."""
    idx = np.searchsorted(report.thresholds, threshold, side="left")
    if idx >= len(report.thresholds):
        return 0.0
    return float(report.survival[idx])


# ------------------------------------------------------------------ CSV io

def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def read_csv(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------ reports

def _seed_dirs(run_dir: Path) -> list[Path]:
    return sorted((p for p in run_dir.iterdir() if p.is_dir() and p.name.startswith("seed_")),
                  key=lambda p: int(p.name.split("_")[1]))


def learning_curve(run_dir) -> list[tuple[int, float, float, int]]:
    """``(iteration, mean, std, n_seeds)`` of per-seed mean evaluation scores."""
    per_iter: dict[int, list[float]] = {}
    for sd in _seed_dirs(Path(run_dir)):
        path = sd / "eval.csv"
        if not path.exists():
            continue
        by_iter: dict[int, list[float]] = {}
        for row in read_csv(path):
            by_iter.setdefault(int(row["iteration"]), []).append(float(row["score"]))
        for it, scores in by_iter.items():
            per_iter.setdefault(it, []).append(float(np.mean(scores)))
    out = []
    for it in sorted(per_iter):
        vals = np.asarray(per_iter[it])
        out.append((it, float(vals.mean()), float(vals.std()), len(vals)))
    return out


def final_returns(run_dir) -> list[float]:
    """Scores of the last evaluation of every seed."""
    out: list[float] = []
    for sd in _seed_dirs(Path(run_dir)):
        path = sd / "eval.csv"
        if not path.exists():
            continue
        rows = read_csv(path)
        if not rows:
            continue
        last = max(int(r["iteration"]) for r in rows)
        out += [float(r["score"]) for r in rows if int(r["iteration"]) == last]
    return out


def emit_report(run_dir, plot: bool = True) -> dict:
    """Write ``curve.csv``, ``ccdf.csv``, ``summary.csv`` (and ``report.svg``)."""
    run_dir = Path(run_dir)
    curve = learning_curve(run_dir)
    write_csv(run_dir / "curve.csv", ["iteration", "mean", "std", "n_seeds"], curve)
    returns = final_returns(run_dir)
    summary = {"n_returns": len(returns)}
    if returns:
        rep = ccdf(returns)
        write_csv(run_dir / "ccdf.csv", ["threshold", "survival"],
                  zip(rep.thresholds.tolist(), rep.survival.tolist()))
        summary.update(area=rep.area, mean=float(np.mean(returns)), max=float(np.max(returns)))
        write_csv(run_dir / "summary.csv", ["n_returns", "area", "mean", "max"],
                  [(len(returns), rep.area, summary["mean"], summary["max"])])
    else:
        rep = None
        write_csv(run_dir / "ccdf.csv", ["threshold", "survival"], [])
        write_csv(run_dir / "summary.csv", ["n_returns", "area", "mean", "max"], [])
    if plot:
        (run_dir / "report.svg").write_text(render_svg(curve, rep))
    summary["curve"] = curve
    summary["ccdf"] = rep
    return summary


def _polyline(xs, ys, box, color: str) -> str:
    x0, y0, w, h = box
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    if xs.size == 0:
        return ""
    xmin, xmax = xs.min(), xs.max() if xs.max() > xs.min() else xs.min() + 1
    ymax = ys.max() if ys.max() > 0 else 1.0
    pts = " ".join(f"{x0 + (x - xmin) / (xmax - xmin) * w:.2f},{y0 + h - y / ymax * h:.2f}"
                   for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>'


def render_svg(curve, rep: CCDFReport | None) -> str:
    """Two-panel learning curve / CCDF plot as standalone SVG."""
    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="640" height="260" font-family="sans-serif" font-size="11">',
             '<rect width="640" height="260" fill="white"/>']
    boxes = [(40, 30, 260, 190), (360, 30, 260, 190)]
    titles = ["mean eval score (+/- std)", "CCDF of final scores"]
    for (x, y, w, h), title in zip(boxes, titles):
        parts.append(f'<rect x="{x}" y="{y}" width="{w}" height="{h}" fill="none" stroke="#888"/>')
        parts.append(f'<text x="{x}" y="{y - 8}">{title}</text>')
    if curve:
        its = [c[0] for c in curve]
        means = np.array([c[1] for c in curve])
        stds = np.array([c[2] for c in curve])
        top = max(float((means + stds).max()), 1e-9)
        scale = lambda v: v / top * (means.max() if means.max() > 0 else 1.0)  # noqa: E731
        parts.append(_polyline(its, scale(means + stds), boxes[0], "#9ecae1"))
        parts.append(_polyline(its, scale(np.maximum(means - stds, 0)), boxes[0], "#9ecae1"))
        parts.append(_polyline(its, scale(means), boxes[0], "#08519c"))
    if rep is not None:
        xs = np.repeat(rep.thresholds, 2)[1:]
        ys = np.repeat(rep.survival, 2)[:-1]
        parts.append(_polyline(xs, ys, boxes[1], "#a50f15"))
    parts.append("</svg>")
    return "\n".join(p for p in parts if p)
