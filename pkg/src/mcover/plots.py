"""Figure rendering for sweep summaries and trial distributions.

The CSV files stay the source of truth; these helpers render matplotlib
figures next to them so a sweep directory is browsable at a glance.
"""
from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def _read_csv(path) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def render_summary_figure(summary_paths, out_path, title: str = "",
                          log_x: bool = False, ylabel: str = "error") -> Path:
    """Error-bar curves (mean +- 95% CI) from one or more sweep summary CSVs."""
    if isinstance(summary_paths, (str, Path)):
        summary_paths = [summary_paths]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    xlabel = "value"
    for path in summary_paths:
        rows = [r for r in _read_csv(path) if int(r["n"]) > 0]
        if not rows:
            continue
        xlabel = rows[0]["param"]
        label = f"{rows[0]['method']} M={rows[0]['M']}"
        if len({r["M"] for r in rows}) > 1:
            label = rows[0]["method"]
        xs = [float(r["value"]) for r in rows]
        ys = [float(r["mean"]) for r in rows]
        errs = [0.0 if math.isnan(float(r["ci95"])) else float(r["ci95"]) for r in rows]
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if log_x:
        ax.set_xscale("log")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_trial_histogram(results_paths, out_path, metric: str = "test_error",
                           title: str = "") -> Path:
    """Overlaid per-method histograms of a trial metric (benchmark-style view)."""
    if isinstance(results_paths, (str, Path)):
        results_paths = [results_paths]
    fig, ax = plt.subplots(figsize=(5.0, 3.4))
    for path in results_paths:
        rows = _read_csv(path)
        vals = []
        for r in rows:
            try:
                v = float(r[metric])
            except (KeyError, ValueError):
                continue
            if math.isfinite(v):
                vals.append(v)
        if not vals:
            continue
        label = f"{rows[0].get('method', Path(path).stem)} M={rows[0].get('M', '?')}"
        ax.hist(vals, bins=min(20, max(5, len(vals) // 2)), alpha=0.55, label=label)
    ax.set_xlabel(metric)
    ax.set_ylabel("trials")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
