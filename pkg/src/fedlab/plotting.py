"""Matplotlib figures written next to the CSV outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

STAGE_STYLE = {"avg": "-", "encoder": "--", "classifier": "-"}


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_curves(records, path, title=None):
    """Accuracy against cumulative communication, one line per stage."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage in ("avg", "encoder", "classifier"):
        rows = [r for r in records if r["stage"] == stage]
        if rows:
            ax.plot([r["cumulative_cost"] for r in rows], [r["accuracy"] for r in rows], STAGE_STYLE[stage],
                    label=stage, marker="o" if len(rows) < 20 else None, ms=3)
    ax.set_xlabel("cumulative parameters transferred")
    ax.set_ylabel("test accuracy")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return _finish(fig, path)


def plot_comparison(runs, path, budget=None):
    """``runs`` maps a label to its metrics records."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, records in runs.items():
        ax.plot([r["cumulative_cost"] for r in records], [r["accuracy"] for r in records], label=label)
    if budget is not None:
        ax.axvline(budget, color="0.5", lw=0.8, ls=":")
    ax.set_xlabel("cumulative parameters transferred")
    ax.set_ylabel("test accuracy")
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)


def plot_degradation(curve, path):
    """Local accuracy per epoch, with the post-averaging value marked."""
    fig, ax = plt.subplots(figsize=(6, 4))
    clients = sorted({r["client"] for r in curve.records})
    for ci in clients:
        local = [r for r in curve.records if r["client"] == ci and r["phase"] == "local"]
        epochs_per_round = max((r["epoch"] for r in local), default=0)
        xs = [(r["round"] - 1) * epochs_per_round + r["epoch"] for r in local]
        line, = ax.plot(xs, [r["accuracy"] for r in local], label=f"client {ci} local")
        avg = [r for r in curve.records if r["client"] == ci and r["phase"] == "averaged"]
        ax.plot([r["round"] * epochs_per_round for r in avg], [r["accuracy"] for r in avg], "x", ms=8,
                color=line.get_color(), label=f"client {ci} averaged")
    ax.set_xlabel("local epoch")
    ax.set_ylabel("accuracy on own classes")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(frameon=False, fontsize=8)
    return _finish(fig, path)
