"""SVG figures rendered from the CSV tables."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

plt.rcParams["svg.hashsalt"] = "qprl"  # stable element ids across runs

PathLike = Union[str, Path]


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_rd(rows: Sequence[Mapping], out_dir: PathLike) -> list[Path]:
    """One RD plot per (stream, metric) from long-format RD rows."""
    groups: dict = defaultdict(lambda: defaultdict(list))
    for r in rows:
        groups[(str(r["stream"]), str(r["metric"]))][str(r["arm"])].append((float(r["measured_rate"]), float(r["value"])))
    paths = []
    for (stream, metric), arms in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5, 3.6))
        for arm, pts in sorted(arms.items()):
            pts.sort()
            ax.plot([p[0] / 1000 for p in pts], [p[1] for p in pts], marker="o", label=arm)
        ax.set_xlabel("bit-rate (kbps)")
        ax.set_ylabel(metric)
        ax.set_title(stream)
        ax.grid(alpha=0.3)
        ax.legend()
        paths.append(_save(fig, Path(out_dir) / f"rd_{stream}_{metric}.svg"))
    return paths


def plot_training(rows: Sequence[Mapping], path: PathLike, columns=("mean_reward", "mean_task_score", "mean_bitrate_error")) -> Path:
    fig, axes = plt.subplots(len(columns), 1, figsize=(5, 2.2 * len(columns)), sharex=True)
    frames = [float(r["frames"]) for r in rows]
    for ax, col in zip(axes, columns):
        ax.plot(frames, [float(r[col]) for r in rows])
        ax.set_ylabel(col, fontsize=8)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("training frames")
    return _save(fig, path)


def plot_resolution(rows: Sequence[Mapping], path: PathLike) -> Path:
    """BD-rate versus action-grid coarsening factor, with standard-error bars."""
    rows = sorted(rows, key=lambda r: float(r["coarsen"]))
    f = [float(r["coarsen"]) for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.4))
    ax.errorbar(f, [float(r["bd_rate_mean"]) for r in rows], yerr=[float(r["bd_rate_se"]) for r in rows], marker="o", capsize=3)
    ax.set_xscale("log", base=2)
    ax.set_xticks(f, [str(int(v)) for v in f])
    ax.set_xlabel("coarsening factor f (MBs per action cell side)")
    ax.set_ylabel(f"BD-rate (%), {rows[0]['metric'] if rows else ''}")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_bd_bars(rows: Sequence[Mapping], path: PathLike) -> Path:
    """Bar chart of mean BD-rate per arm and metric."""
    metrics = sorted({str(r["metric"]) for r in rows})
    arms = list(dict.fromkeys(str(r["arm"]) for r in rows))
    fig, ax = plt.subplots(figsize=(1.6 + 1.2 * len(arms), 3.4))
    width = 0.8 / max(len(metrics), 1)
    for j, m in enumerate(metrics):
        vals = {str(r["arm"]): r for r in rows if str(r["metric"]) == m}
        xs = [i + j * width for i in range(len(arms))]
        ax.bar(
            xs,
            [float(vals[a]["bd_rate_mean"]) if a in vals else 0.0 for a in arms],
            width,
            yerr=[float(vals[a]["bd_rate_se"]) if a in vals else 0.0 for a in arms],
            label=m,
            capsize=2,
        )
    ax.set_xticks([i + width * (len(metrics) - 1) / 2 for i in range(len(arms))], arms)
    ax.set_ylabel("BD-rate (%)")
    ax.axhline(0.0, color="grey", lw=0.8)
    ax.legend(fontsize=8)
    return _save(fig, path)
