"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "lines.linewidth": 1.4,
}


def _finite(values):
    return [v if v is not None and math.isfinite(v) and v > 0 else float("nan") for v in values]


def plot_run_report(report, path: str | Path) -> Path:
    """Per-step total loss plus per-epoch loss terms and validation scores."""
    path = Path(path)
    with plt.rc_context(STYLE):
        has_val = any(r.get("val_psnr") is not None for r in report.epochs)
        fig, axes = plt.subplots(1, 3 if has_val else 2, figsize=(10 if has_val else 7, 3.0))
        ax = axes[0]
        if report.steps:
            ax.plot([r["step"] for r in report.steps], _finite([r["loss"] for r in report.steps]), color="0.3")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title(f"{report.kind}: step loss")

        ax = axes[1]
        epochs = [r["epoch"] for r in report.epochs]
        for key, label in (("loss", "total"), ("l_r", "L_r"), ("l_s", "L_s"), ("l_d", "L_d")):
            vals = [r.get(key) for r in report.epochs]
            if any(v is not None for v in vals):
                ax.plot(epochs, _finite(vals), marker="o", markersize=3, label=label)
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_title("epoch means")
        if ax.get_legend_handles_labels()[0]:
            ax.legend()

        if has_val:
            ax = axes[2]
            ax.plot(epochs, _finite([r.get("val_psnr") for r in report.epochs]), marker="o", markersize=3)
            ax.set_xlabel("epoch")
            ax.set_ylabel("PSNR (dB)")
            ax.set_title("validation")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_eval(rows: list[dict], path: str | Path) -> Path:
    """Per-sample PSNR bars with the mean marked."""
    path = Path(path)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.35 * len(rows) + 2), 3.0))
        vals = _finite([r["psnr"] for r in rows])
        ax.bar(range(len(rows)), vals, color="0.55")
        finite = [v for v in vals if not math.isnan(v)]
        if finite:
            ax.axhline(sum(finite) / len(finite), color="C3", linestyle="--", label="mean")
            ax.legend()
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels([r["id"] for r in rows], rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("PSNR (dB)")
        ax.set_title("per-sample PSNR")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
