"""Evaluation report rendering: JSON + CSV tables + matplotlib figures.

``render_report`` writes, next to the machine-readable report, a delimited
per-threshold summary and PR-curve / AP-bar figures so a run can be eyeballed
without any tooling.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .evaluation import APReport


def write_threshold_csv(path, report: APReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tp", "fp", "fn", "ap"])
        for t in report.per_threshold:
            writer.writerow([f"{t.threshold:.2f}", t.tp, t.fp, t.n_gt - t.tp, f"{t.ap:.6f}"])


def plot_pr_curves(path, report: APReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("viridis")
    ordered = sorted(report.per_threshold, key=lambda t: t.threshold)
    for i, t in enumerate(ordered):
        color = cmap(i / max(len(ordered) - 1, 1))
        if len(t.recall):
            ax.plot(t.recall, t.precision, drawstyle="steps-post", color=color,
                    label=f"IoU {t.threshold:.2f} (AP {t.ap:.2f})")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="lower left")
    ax.set_title(f"AP {report.ap:.3f}  AP50 {report.ap50:.3f}  AP25 {report.ap25:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_ap_bars(path, report: APReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.2))
    ordered = sorted(report.per_threshold, key=lambda t: t.threshold)
    ax.bar([f"{t.threshold:.2f}" for t in ordered], [t.ap for t in ordered], color="#4878a8")
    ax.axhline(report.ap, color="#b04030", linestyle="--", linewidth=1, label=f"mean AP {report.ap:.3f}")
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def render_report(report: APReport, out_dir) -> list[Path]:
    """Write report.json, per_threshold.csv, and the two figures; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "report.json", out / "per_threshold.csv", out / "pr_curves.png", out / "ap_bars.png"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_threshold_csv(paths[1], report)
    plot_pr_curves(paths[2], report)
    plot_ap_bars(paths[3], report)
    return paths
