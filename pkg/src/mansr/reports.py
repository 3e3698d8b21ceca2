"""Report files for a finished prequential run.

Files written into the output directory (comma-separated, header row):

- ``records.csv``: event, target, rank, gate, is_new, train_freq, hit@5, hit@20
- ``curve.csv``: events, cum_hr5, cum_mrr5, win_hr5 (10k-event window), one row per batch
- ``gate_hist.csv``: bin_lo, bin_hi, old, new (20 uniform bins over [0, 1]; counts)
- ``summary.csv``: model, events, new_event_fraction, HR@5, MRR@5, HR@20, MRR@20
- ``buckets.csv``: bucket, events, items, min_freq, max_freq, HR@5
- ``timing.json``: train_minutes, mean_response_ms (wall clock; not deterministic)
- ``curve.png`` and ``gate_hist.png`` when plotting is enabled

Floats are written with a fixed format so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import MetricsTimeline, frequency_buckets

GATE_BINS = np.linspace(0.0, 1.0, 21)
WINDOW = 10_000


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.6f}"
    return str(x)


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def gate_histogram(tl: MetricsTimeline) -> tuple[np.ndarray, np.ndarray]:
    """Counts of gate values per bin for old-item and new-item targets."""
    old, _ = np.histogram(tl.gates[~tl.is_new], bins=GATE_BINS)
    new, _ = np.histogram(tl.gates[tl.is_new], bins=GATE_BINS)
    return old, new


def summary_rows(timelines: Sequence[MetricsTimeline]) -> list[list]:
    keys = ["model", "events", "new_event_fraction", "HR@5", "MRR@5", "HR@20", "MRR@20"]
    return [[tl.summary()[k] for k in keys] for tl in timelines]


def export_reports(tl: MetricsTimeline, out_dir: str | Path, train_seconds: float = 0.0,
                   plots: bool = True) -> list[Path]:
    """Write every report for one timeline; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def path(name: str) -> Path:
        p = out / name
        written.append(p)
        return p

    h5, h20 = tl.hits(5).astype(int), tl.hits(20).astype(int)
    _write_rows(path("records.csv"), ["event", "target", "rank", "gate", "is_new", "train_freq", "hit@5", "hit@20"],
                zip(range(len(tl)), tl.targets, tl.ranks, tl.gates, tl.is_new.astype(int), tl.freqs, h5, h20))

    ends = tl.batch_ends()
    _write_rows(path("curve.csv"), ["events", "cum_hr5", "cum_mrr5", "win_hr5"],
                zip(ends, tl.cumulative(5, "hr"), tl.cumulative(5, "mrr"), tl.windowed(5, WINDOW)))

    old, new = gate_histogram(tl)
    _write_rows(path("gate_hist.csv"), ["bin_lo", "bin_hi", "old", "new"],
                zip(GATE_BINS[:-1], GATE_BINS[1:], old, new))

    _write_rows(path("summary.csv"), ["model", "events", "new_event_fraction", "HR@5", "MRR@5", "HR@20", "MRR@20"],
                summary_rows([tl]))

    if len(tl):
        rows = frequency_buckets(tl.freqs, tl.targets, tl.ranks)
        _write_rows(path("buckets.csv"), ["bucket", "events", "items", "min_freq", "max_freq", "HR@5"],
                    ([r["bucket"], r["events"], r["items"], r["min_freq"], r["max_freq"], r["HR@5"]] for r in rows))

    timing = {"model": tl.label, "train_minutes": train_seconds / 60.0, "mean_response_ms": tl.mean_response_ms}
    path("timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")

    if plots and len(tl):
        from . import plots as _plots

        written.append(_plots.plot_curves([tl], out / "curve.png"))
        written.append(_plots.plot_gate_hist(tl, out / "gate_hist.png"))
    return written


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_comparison(rows: list[dict], path: str | Path) -> None:
    """Side-by-side summary table of several runs."""
    if not rows:
        raise ValueError("nothing to compare")
    header = list(rows[0].keys())
    _write_rows(Path(path), header, ([r.get(k) for k in header] for r in rows))


def format_table(rows: list[dict]) -> str:
    """Plain-text table for the terminal."""
    if not rows:
        return ""
    header = list(rows[0].keys())
    cells = [header] + [[_fmt(r.get(k)) for k in header] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
