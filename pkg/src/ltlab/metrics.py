"""Frequency-group accuracy splits, overfit-gap line fits, report emission.

Classes are grouped by training count: many (n above the high threshold),
medium, and few (n at or below the low threshold). Groups that contain no
classes are reported as absent rather than zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .losses import ClassProfile
from .trainer import TrainingLog

DEFAULT_THRESHOLDS = (100, 20)


@dataclass
class GroupReport:
    many: Optional[float]
    medium: Optional[float]
    few: Optional[float]
    all: float
    membership: list[str]  # per class: "many" | "medium" | "few"


@dataclass
class OverfitFit:
    """Least-squares line through (frequency rank, train-test accuracy gap)."""

    slope: float
    intercept: float


def group_accuracy(
    per_class_acc: np.ndarray,
    profile: ClassProfile,
    thresholds: tuple[int, int] = DEFAULT_THRESHOLDS,
) -> GroupReport:
    per_class_acc = np.asarray(per_class_acc, dtype=np.float64)
    if per_class_acc.shape != (profile.num_classes,):
        raise ValueError("need one accuracy per class")
    hi, lo = thresholds
    if hi <= lo:
        raise ValueError("thresholds must satisfy high > low")
    counts = profile.counts
    many_mask = counts > hi
    few_mask = counts <= lo
    med_mask = ~many_mask & ~few_mask

    def mean_or_none(mask: np.ndarray) -> Optional[float]:
        return float(np.mean(per_class_acc[mask])) if mask.any() else None

    membership = np.where(many_mask, "many", np.where(med_mask, "medium", "few"))
    return GroupReport(
        many=mean_or_none(many_mask),
        medium=mean_or_none(med_mask),
        few=mean_or_none(few_mask),
        all=float(np.mean(per_class_acc)),
        membership=list(membership),
    )


def least_squares_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Closed-form ordinary least squares: returns (slope, intercept)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("need at least two (x, y) points")
    xm, ym = float(np.mean(x)), float(np.mean(y))
    sxx = float(np.sum((x - xm) ** 2))
    if sxx == 0.0:
        raise ValueError("degenerate regressor: all x equal")
    slope = float(np.sum((x - xm) * (y - ym))) / sxx
    return slope, ym - slope * xm


def frequency_ranks(profile: ClassProfile) -> np.ndarray:
    """rank[c] = position of class c when classes are sorted by descending
    training count (stable, so ties keep class-index order)."""
    order = np.argsort(-profile.counts, kind="stable")
    ranks = np.empty(profile.num_classes, dtype=np.int64)
    ranks[order] = np.arange(profile.num_classes)
    return ranks


def overfit_fit(log: TrainingLog, profile: ClassProfile) -> OverfitFit:
    """Fit the final-epoch train-test accuracy gap against frequency rank."""
    if profile.num_classes < 2:
        raise ValueError("need at least two classes to fit a line")
    final = log.final
    gaps = final.train_per_class - final.test_per_class
    ranks = frequency_ranks(profile)
    slope, intercept = least_squares_line(
        ranks.astype(np.float64), gaps.astype(np.float64)
    )
    return OverfitFit(slope=slope, intercept=intercept)


def _fmt_acc(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def emit_report(
    log: TrainingLog,
    report: GroupReport,
    fit: OverfitFit,
    output_dir: str | Path,
    config_echo: Optional[dict] = None,
    thresholds: tuple[int, int] = DEFAULT_THRESHOLDS,
    write_svg: bool = True,
) -> dict[str, Path]:
    """Write epochs.csv, per_class.csv, summary.json and (optionally) gap.svg.

    Output is byte-reproducible: fixed float formats, sorted JSON keys, and
    no timestamps.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    profile = log.profile
    paths: dict[str, Path] = {}

    epochs_path = out / "epochs.csv"
    lines = ["epoch,lr,loss,ce_component,scl_component,all,many,medium,few"]
    for rec in log.records:
        g = group_accuracy(rec.test_per_class, profile, thresholds)
        lines.append(
            f"{rec.epoch},{rec.lr:.10g},{rec.mean_loss:.10g},"
            f"{rec.ce_component:.10g},{rec.scl_component:.10g},"
            f"{_fmt_acc(g.all)},{_fmt_acc(g.many)},{_fmt_acc(g.medium)},{_fmt_acc(g.few)}"
        )
    epochs_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["epochs"] = epochs_path

    final = log.final
    gaps = final.train_per_class - final.test_per_class
    per_class_path = out / "per_class.csv"
    lines = ["class,n_c,train_acc,test_acc,gap"]
    for c in range(profile.num_classes):
        lines.append(
            f"{c},{int(profile.counts[c])},{final.train_per_class[c]:.6f},"
            f"{final.test_per_class[c]:.6f},{gaps[c]:.6f}"
        )
    per_class_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths["per_class"] = per_class_path

    summary = {
        "many": report.many,
        "medium": report.medium,
        "few": report.few,
        "all": report.all,
        "final_train_acc": float(np.mean(final.train_per_class)),
        "fit_slope": fit.slope,
        "fit_intercept": fit.intercept,
        "epochs": len(log.records),
    }
    _flatten_into(summary, "config", config_echo or {})
    summary_path = out / "summary.json"
    summary_path.write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    paths["summary"] = summary_path

    if write_svg:
        svg_path = out / "gap.svg"
        svg_path.write_text(_gap_svg(profile, gaps, fit), encoding="utf-8")
        paths["svg"] = svg_path
    return paths


def _flatten_into(out: dict, prefix: str, obj: dict) -> None:
    """Dotted-key flattening so the summary file stays a flat JSON object."""
    for key, value in obj.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, dict):
            _flatten_into(out, path, value)
        else:
            out[path] = value


def load_summary(output_dir: str | Path) -> dict:
    with open(Path(output_dir) / "summary.json", encoding="utf-8") as fh:
        return json.load(fh)


def _gap_svg(profile: ClassProfile, gaps: np.ndarray, fit: OverfitFit) -> str:
    """Scatter of per-class gaps over frequency rank plus the fitted line."""
    width, height, margin = 640, 420, 50
    ranks = frequency_ranks(profile)
    n = profile.num_classes
    ymin = min(float(np.min(gaps)), 0.0)
    ymax = max(float(np.max(gaps)), 1e-9)
    span = ymax - ymin or 1.0

    def px(rank: float) -> float:
        return margin + rank / max(n - 1, 1) * (width - 2 * margin)

    def py(gap: float) -> float:
        return height - margin - (gap - ymin) / span * (height - 2 * margin)

    dots = "".join(
        f'<circle cx="{px(r):.2f}" cy="{py(g):.2f}" r="3" fill="steelblue"/>'
        for r, g in zip(ranks, gaps)
    )
    y0 = fit.intercept
    y1 = fit.intercept + fit.slope * (n - 1)
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        f'<rect width="{width}" height="{height}" fill="white"/>'
        f"<g>{dots}</g>"
        f'<line x1="{px(0):.2f}" y1="{py(y0):.2f}" x2="{px(n - 1):.2f}" '
        f'y2="{py(y1):.2f}" stroke="black" stroke-width="2"/>'
        "</svg>\n"
    )
