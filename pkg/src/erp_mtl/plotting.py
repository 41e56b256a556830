"""PNG figures next to the report tables (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated renders byte-identical
_META = {"Software": None}


def plot_curves(signal: str, series: dict, path: str | Path) -> Path:
    """Three stacked panels: alone vs joint MSE, then their difference."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    epochs = np.arange(len(series["independent"]))
    fig, (top, bottom) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    top.plot(epochs, series["independent"], label=f"{signal} alone")
    top.plot(epochs, series["joint"], label=series.get("joint_variation", "joint"))
    top.set_ylabel("validation MSE")
    top.legend(fontsize=8)
    bottom.axhline(0.0, color="0.6", lw=0.8)
    bottom.plot(epochs, series["difference"], color="C2")
    bottom.set_ylabel("joint - alone")
    bottom.set_xlabel("epoch")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_pove(results, path: str | Path) -> Path:
    """Mean POVE (+/- 1 sd over runs) of every signal in every variation."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    labels, means, sds = [], [], []
    for key in results.variations():
        runs = results.by_variation(key)
        for s in key.split("+"):
            vals = np.array([r.final_pove[s] for r in runs.values()])
            labels.append(f"{s} | {key}" if "+" in key else s)
            means.append(vals.mean())
            sds.append(vals.std(ddof=1) if vals.size > 1 else 0.0)
    height = max(2.5, 0.25 * len(labels) + 1)
    fig, ax = plt.subplots(figsize=(7, height))
    y = np.arange(len(labels))
    ax.barh(y, means, xerr=sds, color="C0", alpha=0.8)
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=7)
    ax.invert_yaxis()
    ax.axvline(0.0, color="0.4", lw=0.8)
    ax.set_xlabel("validation POVE")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path
