"""Accuracy and loss curves from a training history."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import EpochRecord  # noqa: E402

# no timestamp/version chunks, so identical input gives identical bytes
_PNG_META = {"Software": None}


_SERIES = {"accuracy": ("train_accuracy", "val_accuracy"), "loss": ("train_loss", "val_loss")}


def curve_figure(records: Sequence[EpochRecord], kind: str):
    """Train and validation curves of ``kind`` ("accuracy" or "loss") against epoch."""
    train_attr, val_attr = _SERIES[kind]
    ylabel = kind
    epochs = [r.epoch for r in records]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(epochs, [getattr(r, train_attr) for r in records], marker="o", ms=3, label="train")
    ax.plot(epochs, [getattr(r, val_attr) for r in records], marker="o", ms=3, label="validation")
    lo, hi = min(epochs), max(epochs)
    ax.set_xlim((lo - 0.5, hi + 0.5) if lo == hi else (lo, hi))
    ax.xaxis.get_major_locator().set_params(integer=True)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    return fig


def plot_history(records: Sequence[EpochRecord], out_dir, run_id: str) -> tuple[Path, Path]:
    """Write ``{run_id}_accuracy.png`` and ``{run_id}_loss.png``; return both paths."""
    if not records:
        raise ValueError("cannot plot an empty history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    acc, loss = out_dir / f"{run_id}_accuracy.png", out_dir / f"{run_id}_loss.png"
    for kind, path in (("accuracy", acc), ("loss", loss)):
        fig = curve_figure(records, kind)
        fig.savefig(path, format="png", metadata=_PNG_META)
        plt.close(fig)
    return acc, loss
