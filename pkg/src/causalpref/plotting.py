"""Figures for the study reports.

All rendering goes through the Agg backend with a fixed style, and PNG
metadata is stripped so reruns produce identical bytes.
"""

from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "savefig.bbox": "tight",
    "svg.hashsalt": "causalpref",
}
COLORS = {"base": "#4c72b0", "multihead": "#dd8452", "adversarial": "#55a868",
          "id": "#4c72b0", "ood": "#c44e52"}


@contextmanager
def _figure(**kw):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(**kw)
        try:
            yield fig, ax
        finally:
            plt.close(fig)


def save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Software/creation keys would otherwise embed version strings and dates
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    return path


def plot_id_ood(rows: Sequence[Sequence[float]], path) -> Path:
    """Rows of ``(rho_tr, id, id_se, ood, ood_se, gap)`` in fractions."""
    arr = np.asarray(rows, dtype=np.float64)
    with _figure() as (fig, ax):
        for col, se, key, label in ((1, 2, "id", "ID"), (3, 4, "ood", "OOD (rho = -0.8)")):
            ax.errorbar(arr[:, 0], 100 * arr[:, col], yerr=100 * arr[:, se], marker="o", capsize=3,
                        color=COLORS[key], label=label)
        ax.set_xlabel("training correlation rho_tr")
        ax.set_ylabel("test accuracy [%]")
        ax.legend()
        return save(fig, path)


def plot_consistency(report, path) -> Path:
    with _figure(ncols=2, figsize=(8.0, 3.4), sharey=True) as (fig, axes):
        for ax, slc in zip(axes, ("inconsistent", "consistent")):
            for v in report.variants:
                means, ses = [], []
                for k in report.knob_values:
                    m, se, _ = report.cell(v, k, slc)
                    means.append(100 * m)
                    ses.append(100 * se)
                ax.errorbar(report.knob_values, means, yerr=ses, marker="o", capsize=3,
                            color=COLORS.get(v), label=v)
            ax.axhline(50.0, color="0.5", lw=0.8, ls="--")
            ax.set_title(f"type(X) {'!=' if slc == 'inconsistent' else '='} C")
            ax.set_xlabel("rho = P(type(X) = C)")
        axes[0].set_ylabel("test accuracy [%]")
        axes[0].legend()
        return save(fig, path)


def plot_arcsin(rows: Sequence[dict], path) -> Path:
    rho = np.array([r["rho"] for r in rows])
    grid = np.linspace(-0.999, 0.999, 400)
    with _figure() as (fig, ax):
        ax.plot(grid, 0.5 - np.arcsin(grid) / np.pi, color="0.2", lw=1.2, label="1/2 - arcsin(rho)/pi")
        ax.errorbar(rho, [r["monte_carlo"] for r in rows], yerr=[3 * r["mc_stderr"] for r in rows],
                    fmt="o", ms=3, color=COLORS["ood"], label="Monte Carlo (3 s.e.)")
        ax.set_xlabel("rho")
        ax.set_ylabel("P(opposite signs)")
        ax.legend()
        return save(fig, path)


def plot_delta_plane(deltas: np.ndarray, alpha: float, alpha_hat: float, path) -> Path:
    """Scatter of score differences with the true and fitted boundaries."""
    with _figure(figsize=(4.2, 4.2)) as (fig, ax):
        opposite = deltas[:, 0] * deltas[:, 1] < 0
        ax.scatter(deltas[~opposite, 0], deltas[~opposite, 1], s=3, color="0.7", label="same sign")
        ax.scatter(deltas[opposite, 0], deltas[opposite, 1], s=3, color=COLORS["ood"], label="opposite sign")
        xs = np.linspace(-4, 4, 2)
        for a, style, name in ((alpha, "-", "true"), (alpha_hat, "--", "fitted")):
            if a < 1.0:
                ax.plot(xs, -a / (1 - a) * xs, style, color="0.1", lw=1, label=f"{name} alpha = {a:g}")
            else:
                ax.axvline(0.0, ls=style, color="0.1", lw=1, label=f"{name} alpha = 1")
        ax.set_xlim(-4, 4)
        ax.set_ylim(-4, 4)
        ax.set_xlabel("delta_1")
        ax.set_ylabel("delta_2")
        ax.legend(loc="upper right", fontsize=7)
        return save(fig, path)


def plot_prop1(rows: Sequence[Sequence], tolerance: float, path) -> Path:
    """Rows of ``(seed, passed, worst_gap)``."""
    with _figure() as (fig, ax):
        seeds = [r[0] for r in rows]
        gaps = [r[2] for r in rows]
        ax.bar(range(len(seeds)), gaps, color=[COLORS["id"] if r[1] else COLORS["ood"] for r in rows])
        ax.axhline(tolerance, color="0.3", ls="--", lw=1)
        ax.set_xticks(range(len(seeds)), [str(s) for s in seeds])
        ax.set_xlabel("world seed")
        ax.set_ylabel("max |plug-in - enumerated|")
        return save(fig, path)


def plot_amce(rows, path) -> Path:
    with _figure() as (fig, ax):
        ks = [r.k for r in rows]
        ax.bar(ks, [r.amce for r in rows], color=COLORS["id"], label="estimate")
        ax.scatter(ks, [r.oracle for r in rows], color="0.1", zorder=3, s=12, label="brute force")
        ax.axhline(0.5, color="0.5", ls="--", lw=0.8)
        ax.set_xlabel("component k")
        ax.set_ylabel("AMCE")
        ax.legend()
        return save(fig, path)
