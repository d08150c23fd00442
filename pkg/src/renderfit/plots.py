"""Report figures rendered to files alongside the delimited output.

All plotting uses the Agg backend so the CLI works headless.  These are
convenience visualizations with no accuracy contract.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .optim import Trace


def plot_trace(trace: Trace, path: str) -> None:
    """Loss and pose-error curves over refinement iterations."""
    iters = [r.iteration for r in trace.records]
    totals = [r.total for r in trace.records]
    have_err = trace.records and trace.records[0].rot_err_deg is not None

    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(iters, totals, color="tab:blue", label="total loss")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss", color="tab:blue")
    ax.tick_params(axis="y", labelcolor="tab:blue")
    ax.set_title(f"refinement trace ({trace.status})")
    if have_err:
        ax2 = ax.twinx()
        ax2.plot(iters, [r.rot_err_deg for r in trace.records],
                 color="tab:red", label="rotation error [deg]")
        ax2.plot(iters, [1e2 * r.trans_err_m for r in trace.records],
                 color="tab:orange", linestyle="--",
                 label="translation error [cm]")
        ax2.set_ylabel("pose error", color="tab:red")
        ax2.tick_params(axis="y", labelcolor="tab:red")
        lines, labels = ax.get_legend_handles_labels()
        l2, lb2 = ax2.get_legend_handles_labels()
        ax.legend(lines + l2, labels + lb2, loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_evaluation(
    e_add_vals, e_adds_vals, path: str, max_threshold: float = 0.10
) -> None:
    """Recall-vs-threshold curves for the ADD and ADD-S error sets."""
    fig, ax = plt.subplots(figsize=(6.2, 4.2))
    taus = np.linspace(0, max_threshold, 200)
    for vals, label, color in (
        (np.asarray(e_add_vals), "ADD", "tab:blue"),
        (np.asarray(e_adds_vals), "ADD-S", "tab:green"),
    ):
        recall = [(vals < t).mean() * 100.0 for t in taus]
        ax.plot(taus * 100.0, recall, label=label, color=color)
    ax.set_xlabel("threshold [cm]")
    ax.set_ylabel("recall [%]")
    ax.set_ylim(0, 102)
    ax.legend()
    ax.set_title("accuracy vs distance threshold")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def plot_gradcheck(report, path: str) -> None:
    """Bar chart of per-term median/max relative FD errors."""
    names = [t.name for t in report.terms]
    med = [100 * t.median_rel for t in report.terms]
    mx = [100 * t.max_rel for t in report.terms]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(6.6, 4.0))
    ax.bar(x - 0.18, med, width=0.36, label="median", color="tab:blue")
    ax.bar(x + 0.18, mx, width=0.36, label="max", color="tab:orange")
    ax.axhline(2.0, color="tab:blue", linestyle=":", linewidth=1)
    ax.axhline(10.0, color="tab:orange", linestyle=":", linewidth=1)
    ax.set_xticks(x, names, rotation=20)
    ax.set_ylabel("relative error [%]")
    ax.set_title("analytic vs finite-difference gradients")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
