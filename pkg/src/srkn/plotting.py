"""Static figure emission for generated rollouts.

Trajectory figures tag every artist with a stable gid ("prefix",
"rollout-0", ...) so the emitted SVG can be inspected structurally, and
each rollout segment is stroked with the color of its argmax mixture
mode. Files are written deterministically: fixed hash salt for SVG ids
and no date metadata.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.collections import LineCollection

MODE_COLORS = tuple(matplotlib.colors.to_hex(c) for c in plt.get_cmap("tab10").colors)
PREFIX_COLOR = "#000000"

matplotlib.rcParams["svg.hashsalt"] = "srkn"


def mode_color(k: int) -> str:
    return MODE_COLORS[int(k) % len(MODE_COLORS)]


def save_figure(fig, path):
    path = str(path)
    if path.endswith(".svg"):
        fig.savefig(path, metadata={"Date": None})
    else:
        fig.savefig(path)
    plt.close(fig)


def plot_trajectories(prefix, rollout_obs, modes, path, title: str | None = None):
    """2-d trajectory figure: observed prefix plus mode-colored rollouts.

    prefix [tau, D], rollout_obs [n, H, D], modes [n, H]; only the first
    two observation coordinates are drawn. Each rollout becomes one line
    collection (gid "rollout-i") whose segment t is colored by modes[i, t];
    the prefix is a single marked black line (gid "prefix").
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    rollout_obs = np.asarray(rollout_obs, dtype=np.float64)
    modes = np.asarray(modes)
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    n = rollout_obs.shape[0] if rollout_obs.size else 0
    for i in range(n):
        pts = np.concatenate([prefix[-1:, :2], rollout_obs[i, :, :2]], axis=0)
        segments = np.stack([pts[:-1], pts[1:]], axis=1)
        colors = [mode_color(k) for k in modes[i]]
        lc = LineCollection(segments, colors=colors, linewidths=1.2, alpha=0.8)
        lc.set_gid(f"rollout-{i}")
        ax.add_collection(lc)
    line, = ax.plot(prefix[:, 0], prefix[:, 1], color=PREFIX_COLOR, marker="o",
                    markersize=4, linewidth=2.0, zorder=3)
    line.set_gid("prefix")
    ax.autoscale_view()
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    ax.set_aspect("equal", adjustable="datalim")
    save_figure(fig, path)


def tile_frames(frames, colors, path, max_cols: int = 12):
    """Tile binary/gray frames in reading order with colored borders.

    frames [N, H, W] in [0, 1]; colors is one hex string per frame (the
    caller passes mode colors for generated frames and a neutral color
    for prefix frames).
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if len(colors) != n:
        raise ValueError(f"{n} frames but {len(colors)} colors")
    cols = min(n, max_cols) if n else 1
    rows = max(1, -(-n // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(1.1 * cols, 1.1 * rows),
                             squeeze=False)
    for idx in range(rows * cols):
        ax = axes[idx // cols][idx % cols]
        if idx >= n:
            ax.axis("off")
            continue
        ax.imshow(frames[idx], cmap="gray_r", vmin=0.0, vmax=1.0,
                  interpolation="nearest")
        ax.set_xticks([])
        ax.set_yticks([])
        for spine in ax.spines.values():
            spine.set_color(colors[idx])
            spine.set_linewidth(3.0)
        ax.set_gid(f"frame-{idx}")
    fig.tight_layout(pad=0.3)
    save_figure(fig, path)
