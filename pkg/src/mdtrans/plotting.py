"""Figures written next to the CSV outputs of the CLI commands."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DEFAULT_TERMS = ("sr", "cc", "dc", "dm", "adv_g", "adv_d", "cls_real", "cls_fake")

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 7,
    "figure.dpi": 100,
})


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if window <= 1 or v.size < window:
        return v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")


def plot_loss_curves(rows: Sequence[dict], path: str | Path, terms: Sequence[str] = DEFAULT_TERMS,
                     window: int = 20) -> Path:
    """One small panel per loss term, raw trace plus moving average."""
    terms = [t for t in terms if any(float(r[t]) != 0.0 for r in rows)] or list(terms[:1])
    ncols = min(4, len(terms))
    nrows = int(np.ceil(len(terms) / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.0 * nrows), squeeze=False)
    it = np.array([int(r["iteration"]) for r in rows])
    for ax, term in zip(axes.flat, terms):
        v = np.array([float(r[term]) for r in rows])
        ax.plot(it, v, lw=0.5, alpha=0.4, color="C0")
        ma = moving_average(v, window)
        ax.plot(it[len(it) - len(ma):], ma, lw=1.2, color="C1")
        ax.set_title(term)
        ax.set_xlabel("iteration")
    for ax in list(axes.flat)[len(terms):]:
        ax.axis("off")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_latent_scatter(latents: dict[str, np.ndarray], path: str | Path, seed: int = 0) -> Path:
    """Prior sample next to each regularizer's 2-D codes; the origin is marked red."""
    n = max(len(v) for v in latents.values())
    prior = np.random.default_rng(seed).standard_normal((n, 2))
    panels = {"prior N(0, I)": prior, **latents}
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.6), sharex=True, sharey=True)
    for ax, (name, z) in zip(np.atleast_1d(axes), panels.items()):
        ax.scatter(z[:, 0], z[:, 1], s=3, alpha=0.5)
        ax.scatter([0], [0], s=20, color="red")
        ax.set_title(name)
        ax.set_aspect("equal")
    lim = float(np.percentile(np.abs(np.concatenate(list(panels.values()))), 99.5)) * 1.1
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_translation_grid(inputs: np.ndarray, outputs: Sequence[np.ndarray], path: str | Path) -> Path:
    """Rows are inputs; first column the input, then one column per translation.

    Arrays are uint8 [N, H, W, 3].
    """
    n, k = len(inputs), len(outputs)
    fig, axes = plt.subplots(n, k + 1, figsize=(1.2 * (k + 1), 1.2 * n), squeeze=False)
    for i in range(n):
        axes[i, 0].imshow(inputs[i])
        for j in range(k):
            axes[i, j + 1].imshow(outputs[j][i])
    for ax in axes.flat:
        ax.set_xticks([])
        ax.set_yticks([])
    axes[0, 0].set_title("input")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
