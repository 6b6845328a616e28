"""Render training and ensemble reports to CSV files and PNG figures.

Everything here is presentation: the numbers come from train.TrainReport and
ensemble.evaluate_ensemble, and each writer returns the path it created.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .train import TrainReport


def _fmt(value: int | float) -> str:
    return str(value) if isinstance(value, int) else f"{value:.6f}"


def save_metrics_csv(reports: Sequence[TrainReport], path: str | Path) -> Path:
    """Long-form per-epoch table: one row per (stage, epoch)."""
    path = Path(path)
    metric_keys: list[str] = []
    for rep in reports:
        for epoch_metrics in rep.dev_metrics:
            for key in epoch_metrics:
                if key not in metric_keys:
                    metric_keys.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "epoch", "train_loss", "classification_loss",
                         "lm_loss", *metric_keys])
        for rep in reports:
            for epoch in range(len(rep.train_loss)):
                dev = rep.dev_metrics[epoch] if epoch < len(rep.dev_metrics) else {}
                writer.writerow([
                    rep.stage, epoch,
                    f"{rep.train_loss[epoch]:.6f}",
                    f"{rep.classification_loss[epoch]:.6f}",
                    f"{rep.lm_loss[epoch]:.6f}",
                    *[_fmt(dev[k]) if k in dev else "" for k in metric_keys],
                ])
    return path


def save_training_figure(reports: Sequence[TrainReport], path: str | Path) -> Path:
    """Two panels: per-epoch training loss and the dev selection metric."""
    path = Path(path)
    fig, (ax_loss, ax_dev) = plt.subplots(1, 2, figsize=(10, 4))
    for rep in reports:
        epochs = range(len(rep.train_loss))
        ax_loss.plot(epochs, rep.train_loss, marker="o", label=rep.stage)
        dev_curve = [m.get(rep.selection_key, float("nan")) for m in rep.dev_metrics]
        if dev_curve:
            ax_dev.plot(range(len(dev_curve)), dev_curve, marker="o", label=rep.stage)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("training loss")
    ax_loss.set_title("loss")
    ax_dev.set_xlabel("epoch")
    ax_dev.set_ylabel("dev metric")
    ax_dev.set_title("dev selection metric")
    ax_dev.set_ylim(0.0, 1.05)
    for ax in (ax_loss, ax_dev):
        if ax.lines:
            ax.legend(fontsize="small")
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_ensemble_csv(result: dict, path: str | Path) -> Path:
    """One row per member plus a final row for the ensemble."""
    path = Path(path)
    rows: list[tuple[str, dict]] = [
        (m.get("label", f"member{i}"), m)
        for i, m in enumerate(result.get("member_metrics", []))
    ]
    rows.append(("ensemble", result["ensemble"]))
    metric_keys: list[str] = []
    for _, metrics in rows:
        for key in metrics:
            if key not in metric_keys and isinstance(metrics[key], (int, float)):
                metric_keys.append(key)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["system", *metric_keys])
        for label, metrics in rows:
            writer.writerow([label, *[_fmt(metrics[k]) if k in metrics else ""
                                      for k in metric_keys]])
    return path


def save_ensemble_figure(result: dict, path: str | Path,
                         metric: str | None = None) -> Path:
    """Bar chart of one metric across the members and the ensemble."""
    path = Path(path)
    ens = result["ensemble"]
    if metric is None:
        metric = "accuracy" if "accuracy" in ens else "f1_a"
    labels = []
    values = []
    for i, m in enumerate(result.get("member_metrics", [])):
        labels.append(m.get("label", f"member{i}"))
        values.append(m.get(metric, float("nan")))
    labels.append("ensemble")
    values.append(ens.get(metric, float("nan")))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(labels), 4))
    bars = ax.bar(range(len(values)), values,
                  color=["#7f9fc4"] * (len(values) - 1) + ["#c47f7f"])
    ax.bar_label(bars, fmt="%.3f", fontsize="small")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize="small")
    ax.set_ylabel(metric)
    ax.set_ylim(0.0, 1.1)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
