"""Report figures.  Rendered off-screen and written next to the JSON/CSV
outputs they illustrate."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
# no timestamps or version strings, so reruns give identical files
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_training_curve(history: list[dict], path, metric_name: str = "validation metric") -> Path:
    with plt.rc_context(STYLE):
        fig, ax1 = plt.subplots(figsize=(4.5, 3.0))
        ep = [r["epoch"] for r in history]
        ax1.plot(ep, [r["val_metric"] for r in history], "o-", color="C0", ms=3, label=metric_name)
        best = [r["epoch"] for r in history if r["selected"]]
        if best:
            b = best[-1]
            ax1.axvline(b, color="0.6", lw=0.8, ls="--")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel(metric_name, color="C0")
        loss = [(r["epoch"], r["train_loss"]) for r in history if r["train_loss"] is not None]
        if loss:
            ax2 = ax1.twinx()
            ax2.plot(*zip(*loss), "s-", color="C1", ms=3)
            ax2.set_ylabel("training loss", color="C1")
            ax2.spines["right"].set_visible(True)
        return _save(fig, path)


def plot_strata(report: dict, path) -> Path:
    """Bar chart of mean per-lesion Dice (error bars: std) by size stratum."""
    names = [s["name"] for s in report["strata_bounds"]]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        means = [report["strata"].get(n, {}).get("mean", np.nan) for n in names]
        stds = [report["strata"].get(n, {}).get("std", 0.0) for n in names]
        counts = [report["strata"].get(n, {}).get("count", 0) for n in names]
        x = np.arange(len(names))
        ax.bar(x, np.nan_to_num(means), yerr=stds, color="C0", capsize=3, alpha=0.85)
        ax.set_xticks(x, [f"{n}\n(n={c})" for n, c in zip(names, counts)])
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("lesion Dice")
        ax.set_title(f"{report['saliency']} heatmaps")
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 3.0))
        x = np.arange(len(rows))
        w = 0.38
        ax.bar(x - w / 2, [r["auc"] or 0.0 for r in rows], w, label="AUC", color="C0")
        ax.bar(x + w / 2, [r["dice"] or 0.0 for r in rows], w, label="Dice", color="C2")
        ax.set_xticks(x, [r["row"] for r in rows])
        ax.set_ylim(0, 1.05)
        ax.legend(frameon=False, loc="upper left")
        return _save(fig, path)


def plot_heatmap(image: np.ndarray, path, title: str | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.2 * image.shape[0] / image.shape[1]))
        ax.imshow(image, cmap="inferno", vmin=0, vmax=255 if image.dtype == np.uint8 else 1, interpolation="nearest")
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_grid(leaderboard: list[dict], path) -> Path:
    """Validation metric of each grid point, grouped by learning rate."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        rates = sorted({r["learning_rate"] for r in leaderboard})
        for i, lr in enumerate(rates):
            pts = sorted((r["alpha"], r["lambda_sd"], r["metric"]) for r in leaderboard if r["learning_rate"] == lr)
            labels = [f"{a:g}/{lam:g}" for a, lam, _ in pts]
            ax.plot(labels, [m for *_, m in pts], "o-", ms=3, color=f"C{i}", label=f"lr={lr:g}")
        ax.set_xlabel("alpha / lambda")
        ax.set_ylabel(leaderboard[0]["metric_name"] if leaderboard else "metric")
        ax.tick_params(axis="x", rotation=90)
        ax.legend(frameon=False)
        return _save(fig, path)
