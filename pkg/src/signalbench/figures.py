"""Render report CSVs to matplotlib figures saved alongside them.

CSV remains the contract; these renderings are derived artifacts the
``report`` subcommand (or ``--plots``) drops into the run directory:
learning curves with the across-replication 10th/90th percentile band,
training-loss series, and a grouped comparison chart.
"""

from __future__ import annotations

import os
from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from signalbench.reporting import (
    AGGREGATE_METRICS,
    read_aggregate_csv,
    read_loss_csv,
    read_raw_csv,
)

_METRIC_LABELS = {
    "travel_time_s_per_km": "Total travel time (s/km)",
    "delay_s_per_km": "Total delay (s/km)",
    "stop_time_s_per_km": "Total stop time (s/km)",
}


def _series_by_episode(rows, metric):
    """raw rows -> (episodes, matrix[replication, episode])"""
    per_rep: dict[int, dict[int, float]] = defaultdict(dict)
    for rep, ep, name, value in rows:
        if name == metric:
            per_rep[rep][ep] = value
    if not per_rep:
        return np.array([]), np.empty((0, 0))
    episodes = sorted({ep for eps in per_rep.values() for ep in eps})
    matrix = np.full((len(per_rep), len(episodes)), np.nan)
    for i, rep in enumerate(sorted(per_rep)):
        for j, ep in enumerate(episodes):
            matrix[i, j] = per_rep[rep].get(ep, np.nan)
    return np.array(episodes), matrix


def plot_learning_curves(
    raw_csv_paths: dict[str, str],
    out_path: str,
    metric: str = "travel_time_s_per_km",
) -> str:
    """Per-episode mean with a shaded 10/90 percentile band per labelled run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, path in raw_csv_paths.items():
        episodes, matrix = _series_by_episode(read_raw_csv(path), metric)
        if episodes.size == 0:
            continue
        mean = np.nanmean(matrix, axis=0)
        lo = np.nanpercentile(matrix, 10, axis=0)
        hi = np.nanpercentile(matrix, 90, axis=0)
        (line,) = ax.plot(episodes, mean, label=label, linewidth=1.5)
        ax.fill_between(episodes, lo, hi, alpha=0.2, color=line.get_color())
    ax.set_xlabel("Episode")
    ax.set_ylabel(_METRIC_LABELS.get(metric, metric))
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_loss_series(loss_csv_path: str, out_path: str) -> str:
    """Per-episode mean training loss, one line per phase, reps averaged."""
    rows = read_loss_csv(loss_csv_path)
    by_phase: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for _rep, phase, ep, loss_mean, _loss_max in rows:
        if np.isfinite(loss_mean):
            by_phase[phase][ep].append(loss_mean)
    fig, ax = plt.subplots(figsize=(7, 4))
    offset = 0
    for phase in ("pretrain", "transfer", "scratch", "train"):
        if phase not in by_phase:
            continue
        eps = sorted(by_phase[phase])
        means = [float(np.mean(by_phase[phase][e])) for e in eps]
        xs = [e + (offset if phase == "transfer" else 0) for e in eps]
        ax.plot(xs, means, label=phase, linewidth=1.5)
        if phase == "pretrain":
            offset = (max(eps) + 1) if eps else 0
    ax.set_xlabel("Episode")
    ax.set_ylabel("Network loss")
    ax.set_yscale("log")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_comparison(aggregate_rows, out_path: str, window: str = "last10") -> str:
    """Grouped bars (scenario x controller) for the three headline metrics."""
    rows = [r for r in aggregate_rows if r[2] == window]
    groups = sorted({(r[0], r[1]) for r in rows})
    fig, axes = plt.subplots(1, len(AGGREGATE_METRICS), figsize=(13, 4), sharey=False)
    for ax, metric in zip(np.atleast_1d(axes), AGGREGATE_METRICS):
        means, stds, labels = [], [], []
        for scenario, controller in groups:
            match = [r for r in rows if r[0] == scenario and r[1] == controller and r[3] == metric]
            if not match:
                continue
            means.append(match[0][4])
            stds.append(match[0][5])
            labels.append(f"{scenario}\n{controller}")
        xs = np.arange(len(means))
        ax.bar(xs, means, yerr=stds, capsize=3)
        ax.set_xticks(xs)
        ax.set_xticklabels(labels, fontsize=7, rotation=30, ha="right")
        ax.set_title(_METRIC_LABELS.get(metric, metric), fontsize=9)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def render_run_directory(run_dir: str, out_dir: str | None = None) -> list[str]:
    """Render every figure the directory's CSVs support; returns the paths."""
    out_dir = out_dir or run_dir
    os.makedirs(out_dir, exist_ok=True)
    produced = []
    raw_paths = {}
    main_raw = os.path.join(run_dir, "raw.csv")
    if os.path.exists(main_raw):
        raw_paths["run"] = main_raw
    for arm in ("transfer", "scratch", "pretrain"):
        p = os.path.join(run_dir, f"{arm}_raw.csv")
        if os.path.exists(p):
            raw_paths[arm] = p
    if raw_paths:
        for metric in _METRIC_LABELS:
            out = os.path.join(out_dir, f"curve_{metric}.png")
            produced.append(plot_learning_curves(raw_paths, out, metric))
    loss_path = os.path.join(run_dir, "loss.csv")
    if os.path.exists(loss_path):
        produced.append(plot_loss_series(loss_path, os.path.join(out_dir, "loss.png")))
    agg_path = os.path.join(run_dir, "aggregate.csv")
    if os.path.exists(agg_path):
        produced.append(
            plot_comparison(read_aggregate_csv(agg_path), os.path.join(out_dir, "aggregate.png"))
        )
    return produced
