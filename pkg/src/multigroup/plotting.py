"""SVG figures: per-method error bars and fitted-vs-true curves."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Fixed salt and no timestamp keep SVG output byte-identical across runs.
matplotlib.rcParams["svg.hashsalt"] = "multigroup"
_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def errorbar_svg(aggregates: dict, metric: str, path, title: str = "") -> Path:
    """Mean +- one standard error per (method, criterion) for ``metric``."""
    keys = [k for k in aggregates if metric in aggregates[k]]
    if not keys:
        raise ValueError(f"no aggregates carry {metric!r}")
    criteria = sorted({c for _, c in keys})
    methods = list(dict.fromkeys(m for m, _ in keys))
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(methods), 3.2))
    width = 0.8 / len(criteria)
    for j, crit in enumerate(criteria):
        xs, ys, es = [], [], []
        for i, m in enumerate(methods):
            a = aggregates.get((m, crit))
            if a is None:
                continue
            xs.append(i + (j - (len(criteria) - 1) / 2) * width)
            ys.append(a[metric])
            es.append(a[metric + "_se"])
        ax.errorbar(xs, ys, yerr=es, fmt="o", capsize=3, label=f"tuned on {crit}")
    ax.set_xticks(range(len(methods)))
    ax.set_xticklabels([m.replace("_", " ") for m in methods], rotation=20, ha="right")
    ax.set_ylabel(metric.replace("_", " "))
    if title:
        ax.set_title(title)
    if len(criteria) > 1:
        ax.legend(frameon=False, fontsize="small")
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, path)


def fit_svg(curves: dict, truth, path, data=None, grid=None, title: str = "") -> Path:
    """Predictions of each fitted model against the true target on [0, 1].

    ``curves`` maps a label to a callable on an (m, 1) array.
    """
    grid = np.linspace(0, 1, 501) if grid is None else np.asarray(grid)
    X = grid[:, None]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if data is not None:
        ax.scatter(data.X[:, 0], data.y, s=6, c="0.7", label="observations")
    ax.plot(grid, truth(grid), c="k", lw=1.5, label="ground truth")
    for label, f in curves.items():
        pred = f.predict(X) if hasattr(f, "predict") else f(X)
        ax.step(grid, pred, where="mid", lw=1, label=label.replace("_", " "))
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize="small")
    return _save(fig, path)
