"""Matplotlib rendering of HI trajectories, loss curves and the RMSE comparison."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

# Fixed SVG ids and no timestamp, so identical data renders identical files.
RC = {
    "svg.hashsalt": "iglide",
    "font.size": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 100,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Date": None} if path.suffix == ".svg" else {}
    fig.savefig(path, bbox_inches="tight", metadata=meta)
    plt.close(fig)
    return path


def _panels(columns):
    groups = {
        "SAP (encoder pathway)": [c for c in columns if c == "sap" or c.startswith("sap_") and c != "sap_ls"],
        "NAP (encoder pathway)": [c for c in columns if c == "nap" or c.startswith("nap_") and c != "nap_ls"],
        "Latent z": [c for c in columns if c in ("sap_ls", "nap_ls")],
        "Uncertainty": [c for c in columns if c.startswith("sigma_")],
    }
    return {k: v for k, v in groups.items() if v}


def plot_hi_trajectory(hi: pd.DataFrame, unit: int, path, clip_pct: float = 99.0, title: str | None = None) -> Path:
    feats = [c for c in hi.columns if c not in ("unit", "cycle", "rul_true", "wear")]
    panels = _panels(feats)
    block = hi[hi["unit"] == unit]
    if block.empty:
        raise ValueError(f"unit {unit} not present")
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.6), squeeze=False)
        for ax, (name, cols) in zip(axes[0], panels.items()):
            for c in cols:
                y = block[c].to_numpy(dtype=float)
                if c.startswith("nap"):
                    # clip against the whole file so units share a scale
                    cap = np.percentile(hi[c].to_numpy(dtype=float), clip_pct)
                    y = np.minimum(y, cap)
                ax.plot(block["cycle"], y, lw=1.0, label=c)
            ax.set_title(name)
            ax.set_xlabel("cycle")
            ax.legend(loc="upper left", frameon=False)
        fig.suptitle(title or f"Unit {unit}")
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(history: pd.DataFrame, path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 2.8))
        ax.plot(history["epoch"], history["train_loss"], label="train")
        ax.plot(history["epoch"], history["val_loss"], label="validation")
        ax.set_yscale("log")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        return _save(fig, path)


def plot_comparison(frame: pd.DataFrame, path) -> Path:
    """Grouped bars of mean RMSE with std error bars, one group per view."""
    views = list(dict.fromkeys(frame["view"]))
    methods = list(dict.fromkeys(frame["method"]))
    width = 0.8 / max(len(methods), 1)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(1.2 + 1.6 * len(views) + 0.2 * len(methods), 3.0))
        x = np.arange(len(views))
        for i, m in enumerate(methods):
            sub = frame[frame["method"] == m].set_index("view").reindex(views)
            err = pd.to_numeric(sub["std"], errors="coerce").fillna(0.0).to_numpy()
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, sub["mean"].to_numpy(dtype=float), width,
                   yerr=err, capsize=2, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels(views)
        ax.set_ylabel("RMSE")
        ax.legend(frameon=False, fontsize=6, ncol=2)
        return _save(fig, path)
