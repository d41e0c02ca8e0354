"""SVG figures for region dumps, training curves and sweeps (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Circle  # noqa: E402

# fixed ids and no timestamp so identical inputs give identical files
matplotlib.rcParams["svg.hashsalt"] = "fisor-lab"
_META = {"Date": None}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def _decorate(ax, cfg):
    for hx, hy in cfg.hazard_centers:
        ax.add_patch(Circle((hx, hy), cfg.hazard_radius, fill=False, color="crimson", lw=1.5))
    gx, gy = cfg.goal_center
    ax.add_patch(Circle((gx, gy), cfg.goal_radius, fill=False, color="forestgreen", lw=1.5))
    w = cfg.arena_half_width
    ax.set_xlim(-w, w)
    ax.set_ylim(-w, w)
    ax.set_aspect("equal")


def region_figure(cols: dict, xs, cfg, path) -> None:
    """One heatmap per learned value with its zero level set and the oracle boundary."""
    n = len(xs)
    keys = [k for k in ("V_h", "V_c") if k in cols]
    oracle = np.asarray(cols["oracle"], dtype=float).reshape(n, n)
    fig, axes = plt.subplots(1, max(len(keys), 1), figsize=(5 * max(len(keys), 1), 4.5), squeeze=False)
    for ax, key in zip(axes[0], keys or ["oracle"]):
        grid = np.asarray(cols[key], dtype=float).reshape(n, n)
        level = 0.0 if key != "V_c" else 1e-3
        im = ax.pcolormesh(xs, xs, grid, shading="auto", cmap="coolwarm", rasterized=True)
        fig.colorbar(im, ax=ax, shrink=0.8)
        if key != "oracle" and grid.min() < level < grid.max():
            ax.contour(xs, xs, grid, levels=[level], colors="k", linewidths=1.2)
        ax.contour(xs, xs, oracle, levels=[0.5], colors="k", linestyles="dashed", linewidths=1.0)
        _decorate(ax, cfg)
        ax.set_title(f"{key} (solid: learned boundary, dashed: oracle)", fontsize=9)
    _save(fig, path)


def curve_figure(rows, keys, path, title="") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for k in keys:
        vals = [r.get(k) for r in rows]
        pts = [(s, v) for s, v in zip(steps, vals) if v not in (None, "")]
        if pts:
            ax.plot(*zip(*pts), label=k)
    ax.set_xlabel("step")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend(fontsize=8)
    ax.set_title(title)
    _save(fig, path)


def sweep_figure(rows, param, path) -> None:
    """Normalized reward and cost against a swept hyperparameter."""
    xs = [r[param] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, [r["normalized_reward"] for r in rows], "o-", label="normalized reward")
    ax.plot(xs, [r["normalized_cost"] for r in rows], "s-", label="normalized cost")
    ax.axhline(1.0, color="grey", lw=0.8, ls=":")
    ax.set_xlabel(param)
    ax.legend(fontsize=8)
    _save(fig, path)


def trajectory_figure(trajs, cfg, path) -> None:
    """Overlay of x-y paths; ``trajs`` has shape (steps, episodes, 4)."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for k in range(trajs.shape[1]):
        ax.plot(trajs[:, k, 0], trajs[:, k, 1], lw=0.8)
    _decorate(ax, cfg)
    _save(fig, path)
