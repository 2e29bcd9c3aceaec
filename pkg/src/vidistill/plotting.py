"""PNG figures written next to the CSV/JSON reports (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed metadata so reruns produce identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(curves: Mapping[str, Sequence[float]], path, title: str = "training loss") -> Path:
    """One line per named curve against epoch number."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, ys in curves.items():
        if len(ys):
            ax.plot(range(1, len(ys) + 1), ys, marker="o", markersize=3, label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    if curves:
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_scaling(series: Mapping[str, Sequence[tuple[float, float]]], path,
                 reference: Mapping[str, Sequence[tuple[float, float]]] | None = None) -> Path:
    """R@1 against training-set size per caption source; an optional reference panel alongside."""
    ncols = 2 if reference else 1
    fig, axes = plt.subplots(1, ncols, figsize=(6 * ncols, 4), squeeze=False)
    ax = axes[0, 0]
    for name, pts in series.items():
        xs, ys = zip(*pts) if pts else ((), ())
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("training clips")
    ax.set_ylabel("held-out text-to-video R@1")
    ax.set_title("synthetic world")
    ax.grid(alpha=0.3)
    ax.legend()
    if reference:
        ax = axes[0, 1]
        for name, pts in reference.items():
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="s", label=name)
        ax.set_xscale("log")
        ax.set_xlabel("training clips (thousands)")
        ax.set_ylabel("R@1 (%)")
        ax.set_title("reference")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    return _save(fig, path)
