"""Report figures written next to the run artifacts (PNG, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .scene import gt_sdf  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_coverage(curves, path, label="ehig", others=None):
    """C.R. against step; ``others`` maps extra labels to their curve lists."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        series = {label: curves}
        series.update(others or {})
        for name, rows in series.items():
            ax.plot([r["step"] for r in rows], [r["CR"] for r in rows], marker="o", ms=2.5,
                    label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("C.R. [%]")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False, loc="lower right")
        return _save(fig, path)


def layer_slice(grid, values, z):
    """Horizontal slice of a flat voxel layer at the voxel row nearest height ``z``."""
    k = int(np.clip(round((z - grid.origin[2]) / grid.voxel_size - 0.5), 0, grid.shape[2] - 1))
    return np.asarray(values).reshape(grid.shape)[:, :, k]


def plot_uncertainty_slice(grid, volume, path, z=1.2):
    names = ("u_imp", "u_exp", "u_time", "u_final")
    extent = (grid.origin[0], grid.upper[0], grid.origin[1], grid.upper[1])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(names), figsize=(3.0 * len(names), 2.2))
        for ax, name in zip(axes, names):
            im = ax.imshow(layer_slice(grid, volume.layer(name), z).T, origin="lower",
                           extent=extent, cmap="magma")
            ax.set_title(f"{name} (z={z:.1f})")
            ax.set_aspect("equal")
            fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_trajectory(scene, trajectory, path, z=1.2, res=0.05, goals=None):
    """Top-down view: ground-truth free space at height ``z`` with the executed path."""
    lo, hi = scene.bounds
    xs = np.arange(lo[0], hi[0] + 1e-9, res)
    ys = np.arange(lo[1], hi[1] + 1e-9, res)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel(), np.full(X.size, z)], axis=1)
    sd = gt_sdf(scene, pts).reshape(X.shape)
    traj = np.array([p.translation for p in trajectory]).reshape(-1, 3)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ax.imshow((sd > 0).T, origin="lower", extent=(lo[0], hi[0], lo[1], hi[1]),
                  cmap="Greys_r", vmin=-0.5, vmax=1.2)
        if len(traj):
            ax.plot(traj[:, 0], traj[:, 1], "-", color="tab:blue", lw=1.0)
            ax.plot(traj[0, 0], traj[0, 1], "o", color="tab:green", ms=4, label="start")
            ax.plot(traj[-1, 0], traj[-1, 1], "s", color="tab:red", ms=4, label="end")
        if goals is not None and len(goals):
            g = np.asarray(goals)
            ax.plot(g[:, 0], g[:, 1], "x", color="tab:orange", ms=4, label="goals")
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal")
        ax.legend(frameon=False, fontsize=7, loc="upper right")
        return _save(fig, path)


def report_figures(ex, out_dir):
    """Coverage curve, uncertainty slices and top-down trajectory for a finished run."""
    out = Path(out_dir) / "figures"
    out.mkdir(parents=True, exist_ok=True)
    goals = [e["goal"] for e in ex.planner_log if isinstance(e, dict) and "goal" in e]
    return [
        plot_coverage(ex.curves, out / "coverage.png", label=ex.cfg.policy),
        plot_uncertainty_slice(ex.grid, ex.volume, out / "uncertainty_slice.png"),
        plot_trajectory(ex.scene, ex.trajectory, out / "trajectory.png", goals=goals),
    ]
