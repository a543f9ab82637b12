"""Figure rendering for trajectories, evaluation reports, and training
curves. Everything is written as SVG through matplotlib with a fixed hash
salt and no timestamp metadata, so identical inputs produce identical bytes.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .world import rot2

matplotlib.rcParams["svg.hashsalt"] = "teamhoi"
_SAVE_KWARGS = {"format": "svg", "metadata": {"Date": None}}


def _save(fig, path):
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def plot_trajectory(states, path) -> None:
    """Top-down view: table outline at its final pose, agent root traces,
    the table-center trace in red, the final table position (black dot), and
    the target (star)."""
    fig, ax = plt.subplots(figsize=(6, 6))
    n = states[0].n_agents
    roots = np.array([[w.agents[i].root for w in states] for i in range(n)])
    centers = np.array([w.table_center() for w in states])

    for i in range(n):
        ax.plot(roots[i, :, 0], roots[i, :, 1], lw=0.8, alpha=0.8,
                label=f"agent {i}")
    ax.plot(centers[:, 0], centers[:, 1], color="red", lw=1.5, label="table center")
    ax.plot(centers[-1, 0], centers[-1, 1], "ko", ms=6, label="final position")
    ax.plot(states[0].target[0], states[0].target[1], "g*", ms=12, label="target")

    final = states[-1]
    outline = final.geometry.spec.boundary_vertices() @ rot2(final.table.yaw).T \
        + final.table.position
    outline = np.vstack([outline, outline[:1]])
    ax.plot(outline[:, 0], outline[:, 1], color="gray", lw=1.2)

    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_metrics_csv(csv_path, path) -> None:
    """Training curves from a metrics CSV: one mean-return polyline per team
    size."""
    rows = []
    with open(csv_path) as f:
        for rec in csv.DictReader(f):
            rows.append(rec)
    if not rows:
        raise ValueError(f"no metric rows in {csv_path}")
    sizes = sorted({int(r["team_size"]) for r in rows})
    fig, ax = plt.subplots(figsize=(7, 4))
    any_line = False
    for nsize in sizes:
        pts = [(int(r["iter"]), float(r["mean_return"])) for r in rows
               if int(r["team_size"]) == nsize and r["mean_return"] != "nan"]
        if pts:
            it, ret = zip(*pts)
            ax.plot(it, ret, label=f"{nsize} agents")
            any_line = True
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean episode return")
    if any_line:
        ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def plot_report(report, path) -> None:
    """Bar chart of success rate per (team size, shape) plus the mean
    cooperative-time ratio."""
    shapes = sorted({r.shape for r in report.rows})
    sizes = sorted({r.team_size for r in report.rows})
    by_key = {(r.team_size, r.shape): r for r in report.rows}
    width = 0.8 / max(1, len(shapes))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    x = np.arange(len(sizes))
    for j, shape in enumerate(shapes):
        sr = [by_key[(n, shape)].sr_percent if (n, shape) in by_key else 0.0
              for n in sizes]
        tc = [by_key[(n, shape)].mean_t_coop_percent if (n, shape) in by_key else 0.0
              for n in sizes]
        ax1.bar(x + j * width, sr, width, label=shape)
        ax2.bar(x + j * width, tc, width, label=shape)
    for ax, ylabel in ((ax1, "success rate (%)"), (ax2, "cooperative time (%)")):
        ax.set_xticks(x + 0.4 - width / 2)
        ax.set_xticklabels([str(n) for n in sizes])
        ax.set_xlabel("team size")
        ax.set_ylabel(ylabel)
        ax.set_ylim(0, 105)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    _save(fig, path)
