"""Figures for the report path (rendered off-screen with the Agg backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.2),
    "figure.dpi": 100,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mansr",
}


def _save(fig, path: Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no timestamp in the metadata so reruns give the same bytes
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_series(series: dict[str, tuple[Sequence, Sequence]], path: str | Path, ylabel: str) -> Path:
    """One line per label against the number of tested events."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (x, y) in series.items():
            ax.plot(x, y, label=label)
        ax.set_xlabel("tested events")
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def plot_curves(timelines: Sequence, path: str | Path, k: int = 5, windowed: bool = False) -> Path:
    """HR@k against the number of tested events, one line per timeline."""
    series = {tl.label: (tl.batch_ends(), tl.windowed(k) if windowed else tl.cumulative(k, "hr")) for tl in timelines}
    return plot_series(series, path, f"{'windowed' if windowed else 'cumulative'} HR@{k}")


def plot_gate_hist(tl, path: str | Path) -> Path:
    """Gate outputs on old-item and new-item targets, as densities."""
    from .reports import GATE_BINS

    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mask, name in ((~tl.is_new, "old items"), (tl.is_new, "new items")):
            if mask.any():
                ax.hist(tl.gates[mask], bins=GATE_BINS, density=True, alpha=0.55, label=name)
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("gate output w (neural weight)")
        ax.set_ylabel("density")
        ax.legend()
        return _save(fig, path)


def plot_buckets(rows_by_model: dict[str, list[dict]], path: str | Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, rows in rows_by_model.items():
            ax.plot([r["bucket"] for r in rows], [r["HR@5"] for r in rows], marker="o", label=name)
        ax.set_xlabel("frequency bucket (1 = rarest)")
        ax.set_ylabel("HR@5")
        ax.legend()
        return _save(fig, path)
