"""Figures written next to the numeric tables (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata so repeated runs write identical files
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_loss_trace(trace: list[dict], path, title: str = "") -> None:
    epochs = [r["epoch"] for r in trace]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key in ("l_new", "l_sbc", "l_fa"):
        vals = [r[key] for r in trace]
        if any(v != 0.0 for v in vals):
            ax.plot(epochs, vals, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    if title:
        ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_entropy_scatter(pairs: np.ndarray, path) -> None:
    """Λ_old against Λ_FA; points below the diagonal were made more discriminative."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.scatter(pairs[:, 0], pairs[:, 1], s=6, alpha=0.6)
    hi = float(max(pairs.max(), 1e-3))
    ax.plot([0, hi], [0, hi], "k--", lw=0.8)
    ax.set_xlabel("entropy of old feature")
    ax.set_ylabel("entropy of adapted feature")
    _save(fig, path)


def plot_sequence(rows: list[dict], path) -> None:
    """Self and cross accuracy per generation, one line pair per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == method]
        gens = [r["generation"] for r in mine]
        ax.plot(gens, [r["m_self"] for r in mine], marker="o", label=f"{method} self")
        ax.plot(gens, [r["m_cross"] for r in mine], marker="s", ls="--", label=f"{method} cross")
    ax.set_xlabel("generation")
    ax.set_ylabel("metric")
    ax.legend()
    _save(fig, path)
