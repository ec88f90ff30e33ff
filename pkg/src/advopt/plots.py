"""Figure rendering for CLI reports.

Renders PNGs next to the delimited outputs.  Kept separate from the
evaluation code so the library itself never imports a plotting backend.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_DPI = 110


def _save(fig, path) -> None:
    fig.savefig(path, dpi=_DPI, metadata={"Software": "advopt"})
    plt.close(fig)


def trajectory_figure(traj, path) -> None:
    """Loss-versus-step curves, one line per attack."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    steps = len(next(iter(traj.losses.values()))) if traj.losses else 0
    xs = np.arange(steps + 1)
    for name in traj.names:
        ys = [traj.initial[name], *traj.losses[name]]
        ax.plot(xs, ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("attack step")
    ax.set_ylabel("mean loss")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def landscape_figure(grid, path) -> None:
    """Filled contour of the loss over the two perturbation directions."""
    fig, ax = plt.subplots(figsize=(5.2, 4.2))
    mesh = ax.pcolormesh(grid.offsets, grid.offsets, grid.z.T, shading="nearest", cmap="coolwarm")
    fig.colorbar(mesh, ax=ax, label="loss")
    ax.set_xlabel("gradient-sign direction")
    ax.set_ylabel("random sign direction")
    fig.tight_layout()
    _save(fig, path)


def report_figure(report, path) -> None:
    """Grouped bars: one group per defense, one bar per column."""
    cols = ["Natural", *report.attacks, "Min"]
    fig, ax = plt.subplots(figsize=(1.8 + 1.3 * len(report.defenses), 4.2))
    width = 0.85 / len(cols)
    xs = np.arange(len(report.defenses))
    for i, col in enumerate(cols):
        if col == "Natural":
            vals = [report.natural[d] for d in report.defenses]
        elif col == "Min":
            vals = [report.mins.get(d, np.nan) for d in report.defenses]
        else:
            vals = [report.cells[d][col] for d in report.defenses]
        ax.bar(xs + (i - len(cols) / 2 + 0.5) * width, vals, width, label=col)
    ax.set_xticks(xs)
    ax.set_xticklabels(report.defenses, rotation=20, ha="right")
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
