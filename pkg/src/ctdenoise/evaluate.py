"""Metrics, transition-matrix comparison, and report plotting."""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ValidationError
from .training import RunReport


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValidationError("accuracy of empty input is undefined")
    if predictions.shape != labels.shape:
        raise ValidationError("predictions and labels must have the same length")
    return float((predictions == labels).mean())


@dataclass
class TransitionComparison:
    """Distance between an estimated and a ground-truth transition matrix."""

    estimated: np.ndarray
    ground_truth: np.ndarray
    frobenius_error: float
    per_row_l1: np.ndarray


def compare_transition(estimated: np.ndarray, ground_truth: np.ndarray) -> TransitionComparison:
    estimated = np.asarray(estimated, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if estimated.shape != ground_truth.shape:
        raise ValidationError(
            f"shape mismatch: {estimated.shape} vs {ground_truth.shape}"
        )
    for name, mat in (("estimated", estimated), ("ground_truth", ground_truth)):
        if not np.isfinite(mat).all():
            raise ValidationError(f"{name} matrix contains NaN or Inf")
        if np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-6:
            raise ValidationError(f"{name} rows must sum to 1 within 1e-6")
    diff = estimated - ground_truth
    return TransitionComparison(
        estimated=estimated,
        ground_truth=ground_truth,
        frobenius_error=float(np.linalg.norm(diff)),
        per_row_l1=np.abs(diff).sum(axis=1),
    )


def plot_report(report: RunReport, out_dir: str) -> list[str]:
    """Write accuracy/loss curves, a transition heatmap, and the raw CSV.

    Re-running on the same report overwrites the same files.  The CSV is the
    canonical record; images are conveniences.
    """
    if not report.epoch_rows:
        raise ValidationError("report has no epochs to plot")
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    epochs = [row["epoch"] for row in report.epoch_rows]

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [r["test_accuracy_0"] for r in report.epoch_rows], label="test (twin 0)")
    ax.plot(epochs, [r["test_accuracy_1"] for r in report.epoch_rows], label="test (twin 1)")
    ax.plot(epochs, [r["train_accuracy"] for r in report.epoch_rows], label="train (noisy)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("accuracy")
    ax.legend()
    fig.tight_layout()
    path = os.path.join(out_dir, "accuracy_curves.png")
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for key in (
        "loss_total",
        "loss_coteaching",
        "loss_transition_ce",
        "loss_policy",
        "loss_decorrelation",
    ):
        ax.plot(epochs, [r[key] for r in report.epoch_rows], label=key.removeprefix("loss_"))
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = os.path.join(out_dir, "loss_curves.png")
    fig.savefig(path)
    plt.close(fig)
    paths.append(path)

    if report.estimated_transition is not None:
        fig, ax = plt.subplots(figsize=(5, 4))
        im = ax.imshow(report.estimated_transition, vmin=0.0, vmax=1.0, cmap="viridis")
        ax.set_xlabel("noisy label")
        ax.set_ylabel("intervened label")
        fig.colorbar(im, ax=ax)
        fig.tight_layout()
        path = os.path.join(out_dir, "transition_heatmap.png")
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)

    csv_path = os.path.join(out_dir, "report.csv")
    report.to_csv(csv_path)
    paths.append(csv_path)
    return paths
