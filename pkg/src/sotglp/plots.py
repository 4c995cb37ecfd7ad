"""Report figures, written as PNG files next to the CSV/JSON outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(curves: dict[int, list[dict]], path) -> Path:
    """One line per seed for the total loss, dashed lines for the branch losses."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for seed, rows in sorted(curves.items()):
            steps = [r["step"] for r in rows]
            (line,) = ax.plot(steps, [r["L_total"] for r in rows], lw=1.2, label=f"seed {seed}")
            ax.plot(steps, [r["L_global"] for r in rows], lw=0.8, ls="--", color=line.get_color())
            ax.plot(steps, [r["L_local"] for r in rows], lw=0.8, ls=":", color=line.get_color())
        ax.set_xlabel("step")
        ax.set_ylabel("loss (solid total, dashed global, dotted local)")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        return _save(fig, path)


def sweep(rows: list[dict], axis: str, path) -> Path:
    """Mean accuracy per grid point with the per-seed spread as error bars."""
    xs = sorted({r["value"] for r in rows})
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        for key, label in (("fused", "fused"), ("global", "global only"), ("local", "local only")):
            vals = [[r[key] for r in rows if r["value"] == x] for x in xs]
            mean = np.array([np.mean(v) for v in vals])
            err = np.array([np.std(v) for v in vals])
            ax.errorbar(xs, 100 * mean, yerr=100 * err, marker="o", ms=3, capsize=2, label=label)
        ax.set_xscale("log", base=2)
        ax.set_xticks(xs, [f"{x:g}" for x in xs])
        ax.set_xlabel("lambda" if axis == "lambda" else "K")
        ax.set_ylabel("top-1 accuracy (%)")
        ax.legend(frameon=False)
        return _save(fig, path)


def saliency_heatmap(saliency: np.ndarray, side: int, marks: dict[str, list[int]], path) -> Path:
    """Saliency on the patch grid; ``marks`` maps a legend label to patch indices."""
    grid = np.asarray(saliency, dtype=np.float64).reshape(side, side)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        im = ax.imshow(grid, cmap="viridis")
        fig.colorbar(im, ax=ax, shrink=0.8)
        for (label, idx), m in zip(marks.items(), "osD^dv"):
            r, c = np.divmod(np.asarray(idx, dtype=int), side)
            ax.scatter(c, r, marker=m, s=30, facecolors="none", edgecolors="w", label=label)
        ax.set_xticks([])
        ax.set_yticks([])
        if marks:
            ax.legend(frameon=False, fontsize=6, loc="upper left", bbox_to_anchor=(1.25, 1.0))
        return _save(fig, path)


def ood_histogram(scores: dict[str, tuple[np.ndarray, np.ndarray]], path) -> Path:
    """One panel per score type, ID and OOD histograms overlaid."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(scores), figsize=(3.2 * len(scores), 2.8), squeeze=False)
        for ax, (name, (id_s, ood_s)) in zip(axes[0], scores.items()):
            bins = np.histogram_bin_edges(np.concatenate([id_s, ood_s]), bins=30)
            ax.hist(id_s, bins=bins, alpha=0.6, label="ID")
            ax.hist(ood_s, bins=bins, alpha=0.6, label="OOD")
            ax.set_title(name)
            ax.set_xlabel("score")
        axes[0][0].legend(frameon=False)
        return _save(fig, path)
