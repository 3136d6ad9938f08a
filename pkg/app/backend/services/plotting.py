"""Comparison figures: metric vs prediction horizon, and marginal contribution bars."""

import logging
from pathlib import Path
from typing import List

import matplotlib as mpl

mpl.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

logger = logging.getLogger(__name__)

METRIC_TITLES = {"acc": "Geometric ACC", "rmse": "RMSE"}

STYLE = {
    "axes.labelsize": 10,
    "font.size": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.2),
}


def plot_horizon_curves(results: pd.DataFrame, metric: str, path: Path, channel: str = "MEAN") -> Path:
    """One curve per label of ``metric`` on ``channel`` against prediction horizon."""
    subset = results[(results["metric"] == metric) & (results["channel"] == channel)]
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, group in subset.groupby("label", sort=False):
            group = group.sort_values("horizon_steps")
            ax.plot(group["horizon_steps"], group["value"], marker="o", label=str(label))
        ax.set_xlabel("prediction horizon")
        ax.set_ylabel(METRIC_TITLES.get(metric, metric))
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_marginal_contribution(bars: pd.Series, metric: str, horizon: int, default_label: str, path: Path) -> Path:
    """Bars of metric(run) - metric(default) at one horizon."""
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = ["tab:green" if v >= 0 else "tab:red" for v in bars.values]
        if metric == "rmse":
            colors = ["tab:red" if v > 0 else "tab:green" for v in bars.values]
        ax.barh([str(i) for i in bars.index], bars.values, color=colors)
        ax.axvline(0.0, color="black", linewidth=0.8)
        ax.set_xlabel(f"{METRIC_TITLES.get(metric, metric)} - default ({default_label}), horizon {horizon}")
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_results(results: pd.DataFrame, out_dir: Path) -> List[Path]:
    """One horizon figure per metric present in ``results``."""
    paths = []
    for metric in sorted(results["metric"].unique()):
        paths.append(plot_horizon_curves(results, metric, Path(out_dir) / f"{metric}.png"))
    logger.info("Wrote %d figures to %s", len(paths), out_dir)
    return paths
