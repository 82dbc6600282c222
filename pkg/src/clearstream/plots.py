"""Figure rendering for training logs and evaluation reports.

Uses the Agg backend so figures render headlessly straight to files; the
CLI report paths call these alongside their key=value output.
"""

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_training_curve(steps, lrs, losses, path):
    """Loss-versus-step curve with the learning rate on a twin axis."""
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(steps, losses, color="tab:blue", linewidth=1.2, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("charbonnier loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax.grid(True, alpha=0.3)
    twin = ax.twinx()
    twin.plot(steps, lrs, color="tab:orange", linewidth=1.0,
              linestyle="--", label="lr")
    twin.set_ylabel("learning rate", color="tab:orange")
    twin.tick_params(axis="y", labelcolor="tab:orange")
    fig.suptitle("training progress")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_eval_figure(report, path):
    """Per-video PSNR bars and SSIM markers, with dataset means."""
    n = max(len(report.per_video), 1)
    idx = np.arange(n)
    psnrs = [p for p, _ in report.per_video] or [float("nan")]
    ssims = [s for _, s in report.per_video] or [float("nan")]
    finite = [p if math.isfinite(p) else float("nan") for p in psnrs]

    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(9.0, 4.0))
    ax_p.bar(idx, finite, color="tab:blue", alpha=0.8)
    if math.isfinite(report.mean_psnr):
        ax_p.axhline(report.mean_psnr, color="tab:red", linewidth=1.0,
                     linestyle="--", label=f"mean {report.mean_psnr:.2f} dB")
        ax_p.legend(loc="lower right")
    ax_p.set_xlabel("video")
    ax_p.set_ylabel("PSNR (dB)")
    ax_p.set_xticks(idx)

    ax_s.plot(idx, ssims, "o-", color="tab:green")
    ax_s.axhline(report.mean_ssim, color="tab:red", linewidth=1.0,
                 linestyle="--", label=f"mean {report.mean_ssim:.4f}")
    ax_s.set_xlabel("video")
    ax_s.set_ylabel("SSIM")
    ax_s.set_ylim(min(0.0, min(ssims)) - 0.05, 1.05)
    ax_s.set_xticks(idx)
    ax_s.legend(loc="lower right")

    fig.suptitle("evaluation report")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
