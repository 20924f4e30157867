"""SVG figures with reproducible bytes (fixed hash salt, no date stamp)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams["svg.hashsalt"] = "cohort-phenotyper"


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def importance_bars(table, path):
    df = table.to_frame().head(table.n_top)
    fig, ax = plt.subplots(figsize=(6, 0.3 * len(df) + 1))
    ax.barh(df["feature"][::-1], df["mean"][::-1], color="tab:blue")
    ax.set_xlabel("mean decrease in Gini impurity")
    _save(fig, path)


def embedding_scatter(coords, labels, path, title="t-SNE embedding"):
    fig, ax = plt.subplots(figsize=(6, 5))
    for c in np.unique(labels):
        m = labels == c
        ax.scatter(coords[m, 0], coords[m, 1], s=6, label=f"Cluster {c + 1}")
    ax.set_title(title)
    ax.legend(markerscale=2, fontsize=8)
    _save(fig, path)


def trajectory_paths(coords, subject_ids, visits, groups, path):
    """Mean embedding position per outcome group at each visit, joined by arrows."""
    fig, ax = plt.subplots(figsize=(6, 5))
    ax.scatter(coords[:, 0], coords[:, 1], s=3, color="0.8")
    vs = np.unique(visits)
    for g in np.unique(groups[groups >= 0]):
        pts = np.array([coords[(groups == g) & (visits == v)].mean(axis=0) for v in vs])
        line, = ax.plot(pts[:, 0], pts[:, 1], marker="o", label=f"Group {g}")
        for a, b in zip(pts[:-1], pts[1:]):
            ax.annotate("", b, a, arrowprops={"arrowstyle": "->", "color": line.get_color()})
    ax.legend(fontsize=8)
    ax.set_title("group trajectories across visits")
    _save(fig, path)


def kld_bars(report, path):
    fig, ax = plt.subplots(figsize=(6, 0.3 * len(report.features) + 1))
    ax.barh(report.features[::-1], report.kld[::-1], color="tab:red")
    ax.set_xlabel("KL divergence, cluster 1 to cluster 2")
    _save(fig, path)


def bic_curve(ks, bics, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ks, bics, marker="o")
    ax.set_xlabel("number of components")
    ax.set_ylabel("BIC")
    _save(fig, path)
