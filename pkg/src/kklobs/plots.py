"""Report figures: SMAPE boxplots per system and a cross-system mean chart.

Rendered to files only (Agg backend); the CSV/JSON artifacts stay the
primary outputs.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_COLORS = {"autonomous": "#888888", "curriculum": "#C96F4A",
           "obs": "#2A6FB0", "dyn": "#4FA06A"}


def smape_boxplot(report: dict, path) -> None:
    """Grouped per-trial SMAPE boxplots: one group per regime, one box per
    variant, for a single system's report dict."""
    regimes = report["regimes"]
    variants = report["variants"]
    n_v = len(variants)
    width = 0.8 / n_v
    fig, ax = plt.subplots(figsize=(1.8 * len(regimes) + 2.0, 3.6))
    for vi, v in enumerate(variants):
        data = [report["trials"][v][r] for r in regimes]
        pos = [ri + (vi - (n_v - 1) / 2) * width for ri in range(len(regimes))]
        bp = ax.boxplot(data, positions=pos, widths=0.85 * width, patch_artist=True,
                        showfliers=False, medianprops={"color": "black"})
        for box in bp["boxes"]:
            box.set_facecolor(_COLORS.get(v, "#BBBBBB"))
            box.set_alpha(0.75)
    ax.set_xticks(range(len(regimes)))
    ax.set_xticklabels(regimes)
    ax.set_ylabel("SMAPE [%]")
    ax.set_title(f"{report['system']}: state-estimation SMAPE over {report['n_trials']} trials")
    handles = [plt.Rectangle((0, 0), 1, 1, facecolor=_COLORS.get(v, "#BBBBBB"), alpha=0.75)
               for v in variants]
    ax.legend(handles, variants, loc="upper left", fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def smape_mean_bars(reports: list[dict], path) -> None:
    """Mean SMAPE per (system, regime, variant) as grouped bars."""
    cells = []
    for rep in reports:
        for r in rep["regimes"]:
            cells.append((rep["system"], r))
    variants: list[str] = []
    for rep in reports:
        for v in rep["variants"]:
            if v not in variants:
                variants.append(v)
    n_v = len(variants)
    width = 0.8 / n_v
    fig, ax = plt.subplots(figsize=(0.65 * len(cells) + 2.5, 3.8))
    for vi, v in enumerate(variants):
        xs, ys = [], []
        for ci, (system, regime) in enumerate(cells):
            rep = next(r for r in reports if r["system"] == system)
            if v in rep["variants"]:
                xs.append(ci + (vi - (n_v - 1) / 2) * width)
                ys.append(rep["means"][v][regime])
        ax.bar(xs, ys, width=0.9 * width, color=_COLORS.get(v, "#BBBBBB"),
               label=v, alpha=0.85)
    ax.set_xticks(range(len(cells)))
    ax.set_xticklabels([f"{s}\n{r}" for s, r in cells], fontsize=7)
    ax.set_ylabel("mean SMAPE [%]")
    ax.set_title("Mean SMAPE by system and input regime")
    ax.legend(fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def bound_curve(bound_data: dict, path) -> None:
    """Worst-case certificate bound(t) for one checkpoint."""
    t = np.asarray(bound_data["t"])
    fig, ax = plt.subplots(figsize=(4.6, 3.2))
    ax.plot(t, bound_data["bound"], color="#2A6FB0", label="certificate")
    ax.axhline(bound_data["asymptotic"], color="#888888", ls="--", lw=1.0,
               label="asymptotic")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("worst-case ||x - xhat||")
    ax.set_title(f"{bound_data['system']}/{bound_data['variant']}: error certificate")
    ax.legend(fontsize=8)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
