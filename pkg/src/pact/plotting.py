"""Figures for harness runs, rendered to PNG files."""

from __future__ import annotations

from pathlib import Path
from typing import TYPE_CHECKING

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

if TYPE_CHECKING:
    from .harness import RunReport


def plot_energy_curves(report: "RunReport", path: Path) -> Path:
    """Mean energy of feasible runs against the sweep value."""
    by_value: dict[float, list[float]] = {}
    for s in report.summaries:
        if s.feasible and s.sweep_value is not None:
            by_value.setdefault(s.sweep_value, []).append(s.total_energy)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = sorted(by_value)
    ys = [sum(by_value[x]) / len(by_value[x]) for x in xs]
    label = report.summaries[0].strategy if report.summaries else ""
    ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(report.summaries[0].sweep_param.lower() if report.summaries else "")
    ax.set_ylabel("energy")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_loss_trajectories(report: "RunReport", path: Path) -> Path:
    """Loss against cumulative time (left) and cumulative energy (right)."""
    fig, (ax_t, ax_e) = plt.subplots(1, 2, figsize=(9, 3.5), sharey=True)
    for s, traj in report.trajectories:
        if not traj.records:
            continue
        label = "base" if s.sweep_value is None else f"{s.sweep_value:g}"
        if len(report.trajectories) > len({x.sweep_value for x, _ in report.trajectories}):
            label += f" seed {s.seed}"
        loss = [traj.initial_loss] + [r.loss for r in traj.records]
        ax_t.plot([0.0] + [r.cum_time for r in traj.records], loss, label=label)
        ax_e.plot([0.0] + [r.cum_energy for r in traj.records], loss, label=label)
    ax_t.set_xlabel("time")
    ax_e.set_xlabel("energy")
    ax_t.set_ylabel("loss")
    for ax in (ax_t, ax_e):
        ax.grid(alpha=0.3)
    if report.trajectories:
        ax_e.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_energy_breakdown(report: "RunReport", path: Path) -> Path:
    """Stacked per-model energy for each run."""
    models = sorted({m for s in report.summaries for m in s.energy_by_model})
    labels = [("base" if s.sweep_value is None else f"{s.sweep_value:g}") + f"/{s.seed}"
              for s in report.summaries]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(labels) + 2), 3.5))
    bottom = [0.0] * len(labels)
    for m in models:
        h = [s.energy_by_model.get(m, 0.0) for s in report.summaries]
        ax.bar(labels, h, bottom=bottom, label=m)
        bottom = [b + x for b, x in zip(bottom, h)]
    ax.set_ylabel("energy")
    ax.set_xlabel("sweep value / seed")
    ax.legend(title="model")
    ax.tick_params(axis="x", labelrotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run_figures(report: "RunReport", out_dir: Path) -> list[str]:
    out_dir = Path(out_dir)
    files = [plot_loss_trajectories(report, out_dir / "loss.png"),
             plot_energy_breakdown(report, out_dir / "energy_breakdown.png")]
    if any(s.sweep_value is not None for s in report.summaries):
        files.append(plot_energy_curves(report, out_dir / "curves.png"))
    return [f.name for f in files]
