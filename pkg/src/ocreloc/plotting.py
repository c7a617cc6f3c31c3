"""Figures for evaluation reports (rendered to files, never shown)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import EvalReport  # noqa: E402


def _cdf(values: np.ndarray, n: int):
    v = np.sort(values[np.isfinite(values)])
    return v, 100.0 * np.arange(1, len(v) + 1) / max(n, 1)


def plot_error_cdf(report: EvalReport, path, title: str = "Localization error") -> None:
    """Cumulative translation and rotation error curves with the threshold marks."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), constrained_layout=True)
    n = report.num_queries
    panels = (
        (axes[0], report.trans_err, [t for t, _ in report.thresholds], "translation error [m]"),
        (axes[1], report.rot_err, [r for _, r in report.thresholds], "rotation error [deg]"),
    )
    for ax, errs, marks, label in panels:
        x, y = _cdf(np.asarray(errs, dtype=float), n)
        if len(x):
            lo = max(float(x[0]), 1e-12)
            ax.step(np.concatenate([[lo], x]), np.concatenate([[0.0], y]), where="post")
            ax.set_xscale("log")
        for mk in sorted(set(marks)):
            ax.axvline(mk, color="0.6", linestyle="--", linewidth=0.8)
        ax.set_xlabel(label)
        ax.set_ylabel("queries [%]")
        ax.set_ylim(0, 100)
        ax.grid(True, which="both", alpha=0.3)
    fig.suptitle(f"{title}: {report.formatted()}")
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
