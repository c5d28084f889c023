"""Matplotlib figures for training reports and render sweeps (file output only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def _series(metrics, name: str) -> tuple[np.ndarray, np.ndarray]:
    pts = [(m.step, getattr(m, name)) for m in metrics if getattr(m, name) is not None]
    if not pts:
        return np.zeros(0), np.zeros(0)
    steps, vals = zip(*pts)
    return np.array(steps), np.array(vals, dtype=float)


def smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(values) < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def loss_curves(metrics: Sequence, path, window: int = 10) -> Path:
    """Adversarial terms, regularizers and time-discriminator accuracy against step."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        for name in ("d_time", "d_img", "g_time", "g_img"):
            s, v = _series(metrics, name)
            if len(v):
                sv = smooth(v, window)
                axes[0].plot(s[len(s) - len(sv):], sv, label=name, lw=1)
        axes[0].set_title("adversarial terms")
        axes[0].legend(frameon=False)
        for name in ("r1", "path_reg"):
            s, v = _series(metrics, name)
            if name == "r1":
                keep = np.array([m.r1_weight > 0 for m in metrics if m.r1 is not None])
                s, v = s[keep], v[keep]
            if len(v):
                axes[1].plot(s, v, label=name, lw=1)
        axes[1].set_yscale("symlog", linthresh=1e-4)
        axes[1].set_title("regularizers")
        axes[1].legend(frameon=False)
        s, v = _series(metrics, "acc_time")
        if len(v):
            sv = smooth(v, window)
            axes[2].plot(s[len(s) - len(sv):], sv, lw=1)
        axes[2].axhline(0.8, color="0.6", lw=0.8, ls="--")
        axes[2].set_ylim(0, 1.02)
        axes[2].set_title("D_time accuracy")
        for ax in axes:
            ax.set_xlabel("step")
        fig.tight_layout()
        return _save(fig, path)


def brightness_histogram(generated: np.ndarray, real: np.ndarray, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        bins = np.linspace(0, 1, 41)
        ax.hist(real, bins=bins, alpha=0.6, density=True, label=f"corpus ({real.mean():.3f}±{real.std():.3f})")
        ax.hist(generated, bins=bins, alpha=0.6, density=True,
                label=f"generated ({generated.mean():.3f}±{generated.std():.3f})")
        ax.set_xlabel("frame-mean brightness")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def frame_grid(frames: np.ndarray, path, row_labels: Sequence[str] = (), col_labels: Sequence[str] = ()) -> Path:
    """``frames`` (rows, cols, H, W, 3) in [0, 1]."""
    rows, cols = frames.shape[:2]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(1.2 * cols, 1.2 * rows), squeeze=False)
        for i in range(rows):
            for j in range(cols):
                ax = axes[i, j]
                ax.imshow(np.clip(frames[i, j], 0, 1), interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if j == 0 and i < len(row_labels):
                    ax.set_ylabel(row_labels[i])
                if i == 0 and j < len(col_labels):
                    ax.set_title(col_labels[j])
        fig.tight_layout()
        return _save(fig, path)


def check_table(checks, path) -> Path:
    """Bar chart of measured value over bound for each invariant check (log scale)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 0.3 * len(checks) + 1))
        names = [c.name for c in checks]
        ratio = []
        for c in checks:
            if c.bound > 0:
                ratio.append(max(c.value / c.bound, 1e-16))
            else:
                ratio.append(1e-16 if c.passed else 10.0)
        colors = ["tab:green" if c.passed else "tab:red" for c in checks]
        ax.barh(names, ratio, color=colors)
        ax.set_xscale("log")
        ax.axvline(1.0, color="0.3", lw=0.8)
        ax.set_xlabel("value / bound")
        ax.invert_yaxis()
        fig.tight_layout()
        return _save(fig, path)
