"""Figure rendering for traces, metric reports, and training curves.

All functions write PNG files and return the written path; nothing is shown
interactively (the Agg backend is forced so headless runs work).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport, mouth_opening
from .motion import EXPR, FRAME_RATE, JAW, ROT, TRANS, BlendshapeModel

DPI = 110


def _timeline(n: int) -> np.ndarray:
    return np.arange(n) / FRAME_RATE


def save_motion_overview(path, coeffs: np.ndarray, states) -> str:
    """Stacked view of one trace: expressions, jaw, pose, and LS-states."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    states = np.asarray(states)
    t = _timeline(coeffs.shape[0])
    fig, axes = plt.subplots(4, 1, figsize=(9, 8), sharex=True)
    for i in range(3):
        axes[0].plot(t, coeffs[:, EXPR.start + i], label=f"expr {i}")
    axes[0].set_ylabel("expression")
    axes[0].legend(loc="upper right", fontsize=8)
    for i in range(3):
        axes[1].plot(t, coeffs[:, JAW.start + i], label=f"jaw {i}")
    axes[1].set_ylabel("jaw")
    axes[1].legend(loc="upper right", fontsize=8)
    axes[2].plot(t, coeffs[:, ROT.start + 2], label="rot z")
    axes[2].plot(t, coeffs[:, TRANS.start], label="trans x")
    axes[2].set_ylabel("pose")
    axes[2].legend(loc="upper right", fontsize=8)
    axes[3].step(t, states, where="post")
    axes[3].set_ylabel("state")
    axes[3].set_yticks([-1, 1], ["listen", "speak"])
    axes[3].set_xlabel("time [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def save_mouth_comparison(path, pred: np.ndarray, gt: np.ndarray,
                          model: BlendshapeModel) -> str:
    """Mouth-opening distance over time, generated vs reference."""
    t = _timeline(np.asarray(pred).shape[0])
    fig, ax = plt.subplots(figsize=(9, 3.2))
    ax.plot(t, mouth_opening(gt, model), label="reference", linewidth=1.8)
    ax.plot(t, mouth_opening(pred, model), label="generated", linewidth=1.2)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mouth opening")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def save_metric_bars(path, report: MetricReport) -> str:
    """Two-panel bar chart: geometric/diversity scores and image scores."""
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.6))
    names = ("lve", "fdd", "mod", "ba", "sid")
    values = [getattr(report, n) for n in names]
    left.bar(names, values, color="tab:blue")
    left.set_title("motion metrics")
    for i, v in enumerate(values):
        left.text(i, v, f"{v:.3g}", ha="center", va="bottom", fontsize=8)
    img_names = ("psnr", "ssim")
    img_values = [report.psnr, report.ssim]
    right.bar(img_names, img_values, color="tab:orange")
    right.set_title("image metrics")
    for i, v in enumerate(img_values):
        right.text(i, v, f"{v:.3g}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)


def save_loss_curve(path, history) -> str:
    """Log-scale total loss by optimizer step from train_step breakdowns."""
    steps = list(range(len(history)))
    totals = [row["total"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 3.6))
    ax.semilogy(steps, totals, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return str(path)
