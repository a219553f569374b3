"""Figures for run reports, written next to the events file."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLORS = {"log": "tab:blue", "dump": "tab:orange"}


def plot_interleaving(events, path, limit: int = 5000):
    """Delivered events by seq, one row per table, colored by origin."""
    events = list(events)[:limit]
    tables = sorted({e.table for e in events})
    row = {t: i for i, t in enumerate(tables)}
    fig, ax = plt.subplots(figsize=(10, 1.2 + 0.5 * max(len(tables), 1)))
    for origin, color in COLORS.items():
        xs = [e.seq for e in events if e.origin == origin]
        ys = [row[e.table] for e in events if e.origin == origin]
        ax.scatter(xs, ys, s=4, c=color, label=origin, marker="|")
    ax.set_yticks(range(len(tables)))
    ax.set_yticklabels(tables)
    ax.set_xlabel("output seq")
    ax.set_title("log events and dump rows in delivery order")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_windows(traces, path):
    """Per window: rows selected, rows evicted by in-window log events, rows emitted."""
    closed = [t for t in traces if t.closed]
    idx = range(len(closed))
    emitted = [len(t.emitted) for t in closed]
    removed = [len(t.removed) for t in closed]
    window_len = [t.hw_lsn - t.lw_lsn - 1 for t in closed]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(10, 5), sharex=True)
    ax1.bar(idx, emitted, color=COLORS["dump"], label="emitted")
    ax1.bar(idx, removed, bottom=emitted, color="tab:red", label="evicted")
    ax1.set_ylabel("chunk rows")
    ax1.legend(fontsize=8)
    ax2.plot(idx, window_len, color=COLORS["log"], lw=1)
    ax2.set_ylabel("log events in window")
    ax2.set_xlabel("window")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_pauses(pause_episodes, path):
    """Histogram of pause lengths in engine steps."""
    lengths = [end - start for start, end, _ in pause_episodes]
    fig, ax = plt.subplots(figsize=(5, 3))
    if lengths:
        ax.hist(lengths, bins=range(0, max(lengths) + 2), color="tab:gray", align="left", rwidth=0.8)
    ax.set_xlabel("pause length (engine steps)")
    ax.set_ylabel("episodes")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_run(result, outdir) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return [
        Path(plot_interleaving(result.events, outdir / "interleaving.png")),
        Path(plot_windows(result.traces, outdir / "windows.png")),
        Path(plot_pauses(result.report.pause_episodes, outdir / "pauses.png")),
    ]
