"""Delimited and graphical renderings of evaluation and training results.

Every report path writes a CSV next to the primary output and renders a
matplotlib figure to a sibling PNG, so batch runs leave both machine- and
eye-readable artifacts.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .metrics import MetricReport

METRIC_COLUMNS = ("pmae", "vde", "mr_stft", "mcd")


def write_metrics_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("name",) + METRIC_COLUMNS)
        for entry in report.files:
            writer.writerow(
                [entry.name] + [getattr(entry, m) for m in METRIC_COLUMNS]
            )
        writer.writerow(
            ["average"] + [report.averages.get(m) for m in METRIC_COLUMNS]
        )


def render_metrics_figure(report: MetricReport, path) -> None:
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    names = [entry.name for entry in report.files]
    xs = range(len(names))
    for ax, metric in zip(axes.flat, METRIC_COLUMNS):
        values = [getattr(entry, metric) for entry in report.files]
        heights = [0.0 if v is None else v for v in values]
        bars = ax.bar(xs, heights, color="#4878cf")
        for bar, v in zip(bars, values):
            if v is None:
                bar.set_color("#d65f5f")
                bar.set_height(0)
        avg = report.averages.get(metric)
        if avg is not None:
            ax.axhline(avg, color="black", linewidth=1, linestyle="--", label="average")
            ax.legend(fontsize=8)
        ax.set_title(metric)
        ax.set_xticks(list(xs))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_loss_csv(loss_history: dict, path) -> None:
    """Rows of (stage, step, loss) for every recorded training step."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("stage", "step", "loss"))
        for stage_index in sorted(loss_history):
            for step, loss in loss_history[stage_index]:
                writer.writerow((stage_index, step, loss))


def render_loss_figure(loss_history: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 5))
    for stage_index in sorted(loss_history):
        history = loss_history[stage_index]
        if not history:
            continue
        steps, losses = zip(*history)
        ax.plot(steps, losses, label=f"stage {stage_index}", linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
