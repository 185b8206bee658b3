"""Report assembly: run records, fixed-column CSV, and rendered figures.

Figures are PNG files written next to the delimited output. Timing values
live under a single "timings_ms" key (and the trailing "ms" CSV column) so
determinism checks can strip them in one place.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import InputError
from .geom import PointCloud, RigidTransform, apply_transform
from .io import transform_to_dict, write_json

BENCHMARK_COLUMNS = "estimator,budget,success,mean_re,mean_te,ms"
_PNG_META = {"Software": "parereg"}


@dataclass(frozen=True)
class RunReport:
    pair: str
    estimator: str
    transform: RigidTransform
    source: str
    inliers: int
    n_correspondences: int
    n_coarse: int
    metrics: dict | None
    timings_ms: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, value in self.timings_ms.items():
            if value < 0:
                raise InputError(f"negative timing for {key}")


def report_to_dict(report: RunReport) -> dict:
    out = {
        "estimator": report.estimator,
        "inliers": int(report.inliers),
        "metrics": report.metrics,
        "n_coarse": int(report.n_coarse),
        "n_correspondences": int(report.n_correspondences),
        "pair": report.pair,
        "source": report.source,
        "timings_ms": {k: float(v) for k, v in report.timings_ms.items()},
        "transform": transform_to_dict(report.transform),
    }
    out.update(report.extra)
    return out


def write_report(report: RunReport, path) -> None:
    write_json(report_to_dict(report), path)


# ---------------------------------------------------------------- CSV

def write_benchmark_csv(rows, path) -> None:
    lines = [BENCHMARK_COLUMNS]
    for row in rows:
        lines.append(
            "%s,%d,%r,%r,%r,%.3f"
            % (
                row["estimator"],
                int(row["budget"]),
                float(row["success"]),
                float(row["mean_re"]),
                float(row["mean_te"]),
                float(row["ms"]),
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def read_benchmark_csv(path):
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != BENCHMARK_COLUMNS:
        raise InputError(f"{path}: missing '{BENCHMARK_COLUMNS}' header")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise InputError(f"{path}:{ln}: expected 6 fields")
        rows.append(
            {
                "estimator": parts[0],
                "budget": int(parts[1]),
                "success": float(parts[2]),
                "mean_re": float(parts[3]),
                "mean_te": float(parts[4]),
                "ms": float(parts[5]),
            }
        )
    return rows


# ---------------------------------------------------------------- figures

def render_benchmark_figure(rows, path) -> None:
    """Success rate against hypothesis budget, one line per estimator."""
    fig, (ax_s, ax_e) = plt.subplots(1, 2, figsize=(9, 3.6))
    estimators = sorted({row["estimator"] for row in rows})
    for name in estimators:
        sub = sorted((r for r in rows if r["estimator"] == name), key=lambda r: r["budget"])
        budgets = [r["budget"] for r in sub]
        ax_s.plot(budgets, [r["success"] for r in sub], marker="o", label=name)
        ax_e.plot(budgets, [r["mean_re"] for r in sub], marker="s", label=name)
    ax_s.set_xlabel("hypothesis budget")
    ax_s.set_ylabel("success rate")
    ax_s.set_ylim(-0.02, 1.02)
    ax_s.legend()
    ax_e.set_xlabel("hypothesis budget")
    ax_e.set_ylabel("mean rotation error (deg)")
    ax_e.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def render_register_figure(
    p: PointCloud, q: PointCloud, transform: RigidTransform, path
) -> None:
    """Top-down overlay before and after applying the estimated transform."""
    fig, (ax_raw, ax_fit) = plt.subplots(1, 2, figsize=(9, 4))
    aligned = apply_transform(p, transform)
    for ax, src, title in ((ax_raw, p, "input"), (ax_fit, aligned, "aligned")):
        ax.scatter(src.points[:, 0], src.points[:, 1], s=2, label="P", alpha=0.6)
        ax.scatter(q.points[:, 0], q.points[:, 1], s=2, label="Q", alpha=0.6)
        ax.set_title(title)
        ax.set_aspect("equal")
        ax.legend(markerscale=4)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def render_eval_figure(aggregate: dict, path) -> None:
    """Bar chart of the rate metrics with the mean errors in the title."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    names = ["fmr", "rr", "tr"]
    values = [aggregate.get(n) or 0.0 for n in names]
    ax.bar(names, values, color=["#4c72b0", "#dd8452", "#55a868"])
    ax.set_ylim(0, 1.05)
    for i, v in enumerate(values):
        ax.text(i, v + 0.02, f"{v:.3f}", ha="center")
    re = aggregate.get("mean_re")
    te = aggregate.get("mean_te")
    re_text = "n/a" if re is None else f"{re:.2f} deg"
    te_text = "n/a" if te is None else f"{te:.3f} m"
    ax.set_title(f"mean RE {re_text} / mean TE {te_text}")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def strip_timings(obj):
    """Deep-copy of a report object with every timing field removed."""
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items() if k != "timings_ms"}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj
