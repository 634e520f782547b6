"""Figure rendering for training traces and evaluation results.

Everything draws through the Agg backend straight to files, so plots
work in headless runs. Each function returns the path it wrote.
"""

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["plot_loss_curve", "plot_pred_scatter", "plot_error_histogram", "render_eval_figures"]


def plot_loss_curve(trace, path):
    """Per-step loss lines, one per stage, from (stage, epoch, step, loss) rows."""
    if not trace:
        raise ValueError("cannot plot an empty training trace")
    fig, ax = plt.subplots(figsize=(7, 4))
    stages = sorted({row[0] for row in trace})
    offset = 0
    for stage in stages:
        losses = [row[3] for row in trace if row[0] == stage]
        xs = np.arange(offset, offset + len(losses))
        ax.plot(xs, losses, label=f"stage {stage}", linewidth=1.2)
        offset += len(losses)
    ax.set_xlabel("optimizer step (stages concatenated)")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pred_scatter(result, path):
    """Ground truth vs. prediction, with the OBO band shaded."""
    gts = np.array([r.gt for r in result.rows])
    preds = np.array([r.pred for r in result.rows])
    top = max(1, int(gts.max()), int(preds.max())) + 1
    fig, ax = plt.subplots(figsize=(5, 5))
    line = np.arange(0, top + 1)
    ax.fill_between(line, line - 1, line + 1, alpha=0.15, label="within one")
    ax.plot(line, line, linewidth=0.8)
    ax.scatter(gts, preds, s=18, alpha=0.6)
    ax.set_xlabel("true count")
    ax.set_ylabel("predicted count")
    ax.set_title(f"counts (OBO={result.obo:.3f}, N={result.n})")
    ax.set_xlim(-0.5, top)
    ax.set_ylim(-0.5, top)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_error_histogram(result, path):
    """Histogram of signed count errors (prediction minus truth)."""
    errors = [r.pred - r.gt for r in result.rows]
    lo, hi = min(errors + [-1]), max(errors + [1])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(errors, bins=np.arange(lo - 0.5, hi + 1.5), edgecolor="black")
    ax.set_xlabel("prediction - truth")
    ax.set_ylabel("videos")
    ax.set_title("count error distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_eval_figures(result, report_path):
    """Write the scatter and histogram next to a report file."""
    stem, _ = os.path.splitext(str(report_path))
    return [
        plot_pred_scatter(result, stem + "_scatter.png"),
        plot_error_histogram(result, stem + "_errors.png"),
    ]
