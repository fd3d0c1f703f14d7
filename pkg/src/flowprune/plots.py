"""Figure rendering for the report paths: every function writes one PNG.

All figures read either a CSV another module exported or plain arrays, so
rendering stays decoupled from training. The Agg backend keeps everything
headless.
"""

from __future__ import annotations

import csv
import json
import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .prune import PruneHistory

DPI = 140


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)


def history_figure(history_csv: str, path: str, ylabel: str = "NLL (nats)") -> None:
    """Train/val/test loss and parameter count across prune iterations."""
    hist = PruneHistory.from_csv(history_csv)
    rows = [r for r in hist.rows if not math.isnan(r.val_nll)]
    it = [r.iter for r in rows]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax.plot(it, [r.train_nll for r in rows], marker="o", label="train")
    ax.plot(it, [r.val_nll for r in rows], marker="s", label="val")
    ax.plot(it, [r.test_nll for r in rows], marker="^", label="test")
    ax.set_xlabel("prune iteration")
    ax.set_ylabel(ylabel)
    ax.legend()
    ax.grid(alpha=0.3)
    ax2.plot(it, [r.params_remaining for r in rows], marker="o", color="tab:red")
    ax2.set_xlabel("prune iteration")
    ax2.set_ylabel("parameters remaining")
    ax2.set_yscale("log")
    ax2.grid(alpha=0.3)
    _save(fig, path)


def sweep_figure(sweep_csv: str, path: str) -> None:
    """Test NLL against cumulative prune ratio, per seed plus median."""
    with open(sweep_csv, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r]
    ratio = [float(row[1]) for row in rows]
    seed_cols = [i for i, h in enumerate(header)
                 if h.startswith("test_nll_s")]
    med_col = header.index("test_nll_median")
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for i in seed_cols:
        ax.plot(ratio, [float(row[i]) for row in rows], alpha=0.4,
                marker=".", label=header[i])
    ax.plot(ratio, [float(row[med_col]) for row in rows], color="black",
            lw=2, marker="o", label="median")
    ax.set_xlabel("cumulative prune ratio")
    ax.set_ylabel("test NLL (nats)")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    _save(fig, path)


def hessian_figure(hessian_csv: str, path: str) -> None:
    """Extreme eigenvalues and trace against prune ratio."""
    with open(hessian_csv, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = list(r)
    col = {h: i for i, h in enumerate(header)}
    ratio = [float(row[col["prune_ratio"]]) for row in rows]
    order = np.argsort(ratio)
    ratio = [ratio[i] for i in order]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    for name, style in (("lambda_max", "o-"), ("lambda_min", "s-")):
        vals = [float(rows[i][col[name]]) for i in order]
        ax.plot(ratio, vals, style, label=name)
    ax.set_xlabel("cumulative prune ratio")
    ax.set_ylabel("eigenvalue")
    ax.legend()
    ax.grid(alpha=0.3)
    tr = [float(rows[i][col["trace"]]) for i in order]
    ax2.plot(ratio, tr, "o-", color="tab:green")
    ax2.set_xlabel("cumulative prune ratio")
    ax2.set_ylabel("Hessian trace")
    ax2.grid(alpha=0.3)
    _save(fig, path)


def samples_figure(data_points: np.ndarray, draws: np.ndarray, path: str) -> None:
    """Model draws over the data cloud."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(data_points[:, 0], data_points[:, 1], s=4, alpha=0.25,
               label="data", color="tab:gray")
    ax.scatter(draws[:, 0], draws[:, 1], s=4, alpha=0.5, label="model",
               color="tab:blue")
    ax.set_aspect("equal")
    ax.legend()
    _save(fig, path)


def density_figure(grid, path: str) -> None:
    """Heatmap of a density grid (object with xs, ys, values)."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    vals = np.exp(grid.values) if getattr(grid, "log_scale", True) else grid.values
    im = ax.pcolormesh(grid.xs, grid.ys, vals, shading="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="density")
    ax.set_aspect("equal")
    _save(fig, path)


def boundary_figure(boundary, path: str) -> None:
    """Classifier probability field, optionally with the training points."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    im = ax.pcolormesh(boundary.xs, boundary.ys, boundary.values,
                       shading="auto", cmap="coolwarm", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax, label="p(class 1)")
    ax.contour(boundary.xs, boundary.ys, boundary.values, levels=[0.5],
               colors="black", linewidths=1.2)
    pts = getattr(boundary, "points", None)
    if pts is not None:
        labs = boundary.labels
        for lab, color in ((0, "tab:blue"), (1, "tab:red")):
            sel = labs == lab
            ax.scatter(pts[sel, 0], pts[sel, 1], s=5, color=color, alpha=0.6)
    ax.set_aspect("equal")
    _save(fig, path)


def trajectory_figure(traj_csv: str, path: str, labels=None) -> None:
    """State paths z(t): columns sample_id, t, z1, z2.

    Labels (one class per sample_id) color the paths; without an explicit
    list they are read from the export's JSON sidecar when present.
    """
    with open(traj_csv, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = [(int(a), float(t), float(x), float(y)) for a, t, x, y in r]
    if labels is None:
        try:
            with open(traj_csv + ".json") as fh:
                labels = json.load(fh).get("labels")
        except OSError:
            labels = None
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    for s in sorted({a for a, *_ in rows}):
        pts = sorted((t, x, y) for a, t, x, y in rows if a == s)
        xs = [p[1] for p in pts]
        ys = [p[2] for p in pts]
        if labels is None:
            color = "tab:gray"
        else:
            color = "tab:red" if labels[s] == 1 else "tab:blue"
        ax.plot(xs, ys, color=color, alpha=0.5, lw=0.8)
        ax.scatter([xs[-1]], [ys[-1]], color=color, s=8)
    ax.set_aspect("equal")
    _save(fig, path)


def field_figure(field_csv: str, path: str) -> None:
    """Quiver of the learned vector field: columns x, y, fx, fy, f_norm."""
    with open(field_csv, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        rows = np.array([[float(v) for v in row] for row in r])
    stride = max(1, int(round(math.sqrt(rows.shape[0]) / 24)))
    side = int(round(math.sqrt(rows.shape[0])))
    if side * side == rows.shape[0]:  # thin a dense lattice for legibility
        sel = rows.reshape(side, side, -1)[::stride, ::stride].reshape(-1, 5)
    else:
        sel = rows
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    ax.quiver(sel[:, 0], sel[:, 1], sel[:, 2], sel[:, 3], sel[:, 4],
              angles="xy", width=0.004, cmap="viridis")
    ax.set_aspect("equal")
    _save(fig, path)
