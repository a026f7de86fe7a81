"""Post-hoc figures written next to the CSV output."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_tracking(with_gp, without, out_dir) -> list[Path]:
    with plt.rc_context(STYLE):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.6))
        ax0.plot(with_gp.column("x_ref"), with_gp.column("y_ref"), "k--", lw=1, label="reference")
        ax0.plot(without.column("x"), without.column("y"), color="tab:red", lw=1, label="nominal")
        ax0.plot(with_gp.column("x"), with_gp.column("y"), color="tab:green", lw=1, label="with GP")
        ax0.set_xlabel("x [m]")
        ax0.set_ylabel("y [m]")
        ax0.set_aspect("equal", adjustable="datalim")
        ax0.legend(loc="upper right")
        t = with_gp.column("t")
        ax1.plot(t, without.column("err"), color="tab:red", lw=1, label="nominal")
        ax1.plot(t, with_gp.column("err"), color="tab:green", lw=1, label="with GP")
        ax1.set_xlabel("t [s]")
        ax1.set_ylabel("position error [m]")
        ax1.legend()
        p = _save(fig, Path(out_dir) / "tracking.png")
    return [p]


def _ellipse(family, mu, n=200):
    s = np.linspace(0, 2 * np.pi, n)
    a = np.sqrt(family.z_axis_sq)
    return family.z_center + a * np.cos(s), np.sin(s) / np.sqrt(mu)


def plot_barrier(result, family, out_dir) -> list[Path]:
    rec = result.record
    paths = []
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 4))
        ax.plot(rec.column("z"), rec.column("vz"), color="0.6", lw=0.6, label="flight")
        z, v = _ellipse(family, result.mu_trace[0])
        ax.plot(z, v, "r--", lw=1.2, label=f"initial mu={result.mu_trace[0]:.2f}")
        z, v = _ellipse(family, result.cert.mu)
        ax.plot(z, v, "g-", lw=1.4, label=f"final mu={result.cert.mu:.3f}")
        cov = result.coverage
        if cov is not None and len(cov):
            P = cov.points[:, list(cov.axes)]
            ax.plot(P[:, 0], P[:, 1], "x", ms=2, color="tab:blue", label="cover samples")
        ax.set_xlabel("z [m]")
        ax.set_ylabel("vz [m/s]")
        ax.legend(loc="upper right", fontsize=7)
        paths.append(_save(fig, Path(out_dir) / "barrier_region.png"))

        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.step(np.arange(len(result.mu_trace)), result.mu_trace, where="post")
        ax.set_xlabel("iteration")
        ax.set_ylabel("mu")
        ax.set_yscale("log")
        paths.append(_save(fig, Path(out_dir) / "mu_trace.png"))
    return paths


def plot_example1(traj, out_dir, resolution: float = 0.01) -> list[Path]:
    from .example1 import BOX, barrier, grid, lyapunov, rk4

    P = grid(resolution)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        ax.contour(P[..., 0], P[..., 1], lyapunov(P), levels=[1.0], colors="r", linestyles="--")
        ax.contour(P[..., 0], P[..., 1], barrier(P), levels=[0.0], colors="g")
        starts = np.stack([traj.column("x1_0"), traj.column("x2_0")], axis=1)[:20]
        X = starts.copy()
        path = [X]
        for _ in range(1000):
            X = rk4(X, 0.01)
            path.append(X)
        path = np.array(path)
        for i in range(path.shape[1]):
            ax.plot(path[:, i, 0], path[:, i, 1], color="0.5", lw=0.5)
        ax.set_xlim(*BOX)
        ax.set_ylim(*BOX)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal")
        p = _save(fig, Path(out_dir) / "example1.png")
    return [p]
