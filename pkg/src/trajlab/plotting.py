"""Report figures, written to SVG files with a non-interactive backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "svg.hashsalt": "trajlab",  # stable ids so reruns produce identical files
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def curves_by_group(curves, key_field: str, path, title: str = "", ylabel: str = "loss") -> Path:
    """Line plot of every curve, colored by its group value."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        keys = sorted({c.meta.get(key_field) for c in curves}, key=str)
        cmap = plt.get_cmap("viridis", max(len(keys), 2))
        seen = set()
        for c in curves:
            k = c.meta.get(key_field)
            i = keys.index(k)
            label = f"{key_field}={k:.4g}" if isinstance(k, float) else f"{key_field}={k}"
            ax.plot(c.tokens, c.values, color=cmap(i), lw=1.0, label=None if k in seen else label)
            seen.add(k)
        ax.set_xlabel("tokens")
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def heatmap(matrix: np.ndarray, labels: Sequence[str], path, title: str = "", threshold: float | None = None) -> Path:
    """Distance matrix; cells below ``threshold`` are outlined."""
    m = np.asarray(matrix, dtype=np.float64)
    with plt.rc_context(STYLE):
        size = max(4.0, 0.35 * len(labels) + 2.0)
        fig, ax = plt.subplots(figsize=(size, size))
        im = ax.imshow(np.ma.masked_invalid(m), cmap="magma_r")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_xticks(range(len(labels)))
        ax.set_yticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=90)
        ax.set_yticklabels(labels)
        if threshold is not None:
            for i, j in zip(*np.nonzero(np.nan_to_num(m, nan=np.inf) < threshold)):
                ax.add_patch(plt.Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, ec="tab:cyan", lw=1.2))
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def series(x, ys: dict[str, Sequence[float]], path, xlabel: str, ylabel: str, title: str = "",
           logx: bool = False, logy: bool = False) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for name, y in ys.items():
            ax.plot(x, y, marker="o", ms=3, lw=1.0, label=name)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if logx:
            ax.set_xscale("log")
        if logy:
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        if len(ys) > 1:
            ax.legend()
        return _save(fig, path)


def scatter_fit(x, y, fit_x, fit_y, path, xlabel: str, ylabel: str, title: str = "", logx: bool = True) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.scatter(x, y, s=12, color="k", label="data")
        ax.plot(fit_x, fit_y, color="tab:red", lw=1.0, label="fit")
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def surface(etas, lams, losses, fit, path, title: str = "") -> Path:
    """Loss over the (log2 eta, log2 lambda) grid with the fitted surface's contours."""
    x, y = np.log2(etas), np.log2(lams)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        sc = ax.scatter(x, y, c=losses, cmap="viridis", s=40)
        fig.colorbar(sc, ax=ax)
        gx, gy = np.meshgrid(np.linspace(x.min() - 0.5, x.max() + 0.5, 60), np.linspace(y.min() - 0.5, y.max() + 0.5, 60))
        gz = fit.c + fit.b[0] * gx + fit.b[1] * gy + 0.5 * (fit.H[0, 0] * gx**2 + 2 * fit.H[0, 1] * gx * gy + fit.H[1, 1] * gy**2)
        ax.contour(gx, gy, gz, levels=12, colors="0.5", linewidths=0.6)
        if fit.x_star is not None:
            ax.plot(*fit.x_star, marker="*", color="tab:red", ms=10)
        ax.set_xlabel("log2 eta")
        ax.set_ylabel("log2 lambda")
        if title:
            ax.set_title(title)
        return _save(fig, path)
