"""Static figures: loss curves, ratio-sweep bars and a 2-D projection of one episode."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402

__all__ = ["plot_loss_curves", "plot_sweep", "plot_episode_projection"]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # Fixed metadata keeps the files byte-stable across runs.
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def plot_loss_curves(curves: dict[str, list[float]], path, title: str = "") -> Path:
    fig, axes = plt.subplots(1, len(curves), figsize=(4.5 * len(curves), 3.2), squeeze=False)
    for ax, (name, losses) in zip(axes[0], curves.items()):
        losses = np.asarray(losses, dtype=float)
        ax.plot(losses, lw=0.6, alpha=0.4, color="tab:blue")
        if len(losses) >= 50:
            w = max(len(losses) // 50, 1)
            smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
            ax.plot(np.arange(w - 1, len(losses)), smooth, color="tab:blue")
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows: list[dict], path, title: str = "") -> Path:
    """Grouped bars of joint accuracy (with 95% CI) per ratio, one colour per method."""
    methods = list(dict.fromkeys(r["method"] for r in rows))
    ratios = list(dict.fromkeys(r["ratio"] for r in rows))
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(1.6 + 1.4 * len(ratios), 3.4))
    for k, m in enumerate(methods):
        sel = {r["ratio"]: r for r in rows if r["method"] == m}
        x = np.arange(len(ratios)) + (k - (len(methods) - 1) / 2) * width
        ax.bar(x, [100 * sel[r]["acc"] for r in ratios], width,
               yerr=[100 * sel[r]["ci95"] for r in ratios], label=m, capsize=3)
    ax.set_xticks(np.arange(len(ratios)), [f"{a}:{b}" for a, b in ratios])
    ax.set_xlabel("base : novel unlabeled")
    ax.set_ylabel("joint accuracy (%)")
    lo = min(100 * r["acc"] for r in rows)
    ax.set_ylim(max(lo - 10, 0), 100)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def plot_episode_projection(query_features, query_labels, n_base: int, prototypes, refined,
                            path, title: str = "") -> Path:
    """Project unit-normalised queries and novel prototypes (before/after refinement) to 2-D.

    ``prototypes`` and ``refined`` are ``(d, N)`` column matrices.
    """
    q = _unit(np.asarray(query_features, dtype=float))
    p0 = _unit(np.asarray(prototypes, dtype=float).T)
    p1 = _unit(np.asarray(refined, dtype=float).T)
    pca = PCA(n_components=2, svd_solver="full").fit(np.vstack([q, p0, p1]))
    zq, z0, z1 = pca.transform(q), pca.transform(p0), pca.transform(p1)
    labels = np.asarray(query_labels)
    fig, ax = plt.subplots(figsize=(5, 4.2))
    base = labels <= n_base
    ax.scatter(*zq[base].T, s=8, c="lightgray", label="base queries")
    cmap = plt.get_cmap("tab10")
    for j in range(p0.shape[0]):
        c = cmap(j % 10)
        sel = labels == n_base + 1 + j
        ax.scatter(*zq[sel].T, s=10, color=c, alpha=0.7)
        ax.scatter(*z0[j], marker="o", s=90, facecolor="none", edgecolor=c, linewidth=1.5)
        ax.scatter(*z1[j], marker="*", s=160, color=c, edgecolor="k", linewidth=0.5)
        ax.annotate("", xy=z1[j], xytext=z0[j], arrowprops=dict(arrowstyle="->", color=c, lw=1))
    ax.scatter([], [], marker="o", facecolor="none", edgecolor="k", label="support prototype")
    ax.scatter([], [], marker="*", color="k", label="refined prototype")
    ax.legend(fontsize=7, loc="best")
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
