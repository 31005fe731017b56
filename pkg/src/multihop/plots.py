"""Matplotlib renderings of run/CV reports, written next to the CSV output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from multihop.harness import CvReport, RunReport, RunsReport


def figure_training_curves(report: RunReport):
    """Loss and accuracy curves over epochs, best-validation epoch marked."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = np.arange(1, len(report.train_loss) + 1)
    ax_loss.plot(epochs, report.train_loss, label="train loss")
    ax_loss.plot(epochs, report.val_loss, label="val loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_acc.plot(epochs, report.train_acc, label="train acc")
    ax_acc.plot(epochs, report.val_acc, label="val acc")
    if report.best_epoch >= 0:
        ax_acc.axvline(report.best_epoch + 1, color="gray", ls="--", lw=1, label="best val")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend()
    fig.suptitle(f"seed {report.seed}: test acc {report.test_acc:.4f}")
    fig.tight_layout()
    return fig


def figure_branch_weights(report: RunReport):
    """Mean fusion weight per branch at the selected checkpoint."""
    weights = report.branch_weight_means or []
    fig, ax = plt.subplots(figsize=(4, 3.2))
    ax.bar([f"hop {i + 1}" for i in range(len(weights))], weights)
    ax.axhline(1.0 / max(len(weights), 1), color="gray", ls="--", lw=1)
    ax.set_ylabel("mean fusion weight")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return fig


def figure_runs(report: RunsReport):
    """Validation vs test accuracy per run; selected runs highlighted."""
    fig, ax = plt.subplots(figsize=(5, 4))
    chosen = set(report.selected_seeds)
    val = [r.best_val_acc for r in report.runs]
    test = [r.test_acc for r in report.runs]
    sel = [r.seed in chosen for r in report.runs]
    ax.scatter([v for v, s in zip(val, sel) if not s], [t for t, s in zip(test, sel) if not s],
               s=18, alpha=0.6, label="dropped")
    ax.scatter([v for v, s in zip(val, sel) if s], [t for t, s in zip(test, sel) if s],
               s=22, label="selected")
    ax.axhline(report.test_mean, color="gray", ls="--", lw=1)
    ax.set_xlabel("validation accuracy")
    ax.set_ylabel("test accuracy")
    ax.legend()
    ax.set_title(f"top-{len(chosen)} mean {report.test_mean:.4f} ± {report.test_std:.4f}")
    fig.tight_layout()
    return fig


def figure_cv(report: CvReport):
    """Per-fold accuracies, baseline alongside when present."""
    fig, ax = plt.subplots(figsize=(6, 3.6))
    folds = np.arange(len(report.accs))
    width = 0.38 if report.baseline_accs else 0.7
    ax.bar(folds, report.accs, width=width, label="model")
    if report.baseline_accs:
        ax.bar(folds + width, report.baseline_accs, width=width, label="baseline")
        ax.set_title(f"mean {report.mean:.4f} vs {report.baseline_mean:.4f} (p={report.ttest_p:.4g})")
    else:
        ax.set_title(f"mean {report.mean:.4f} ± {report.std:.4f}")
    ax.set_xlabel("fold")
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    return fig


def render_run_figures(report: RunReport, out_dir: str | Path, stem: str = "run") -> list[Path]:
    """Write the figures for one run; returns the created paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    fig = figure_training_curves(report)
    path = out / f"{stem}_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)
    if report.branch_weight_means:
        fig = figure_branch_weights(report)
        path = out / f"{stem}_branch_weights.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def render_runs_figures(report: RunsReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig = figure_runs(report)
    path = out / "runs_selection.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]


def render_cv_figures(report: CvReport, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig = figure_cv(report)
    path = out / "cv_folds.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return [path]
