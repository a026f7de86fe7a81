"""Published quadratic Lyapunov and barrier estimates for a 2D polynomial system."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .emit import RunRecord

# V*(x) = 1.343 x1^2 + 0.5155 x1 x2 + 1.152 x2^2
V_COEFFS = (1.343, 0.5155, 1.152)
# h*(x) = 1 - 0.4254 x1 - 0.3248 x2 - 0.7549 x2^2 - 0.8616 x1^2 - 0.2846 x1 x2
H_COEFFS = (1.0, -0.4254, -0.3248, -0.7549, -0.8616, -0.2846)
BOX = (-1.5, 1.5)


def vector_field(X: np.ndarray) -> np.ndarray:
    x1, x2 = X[..., 0], X[..., 1]
    return np.stack([x2 + 0.8 * x2**2, -x1 - x2 + x1**2 * x2], axis=-1)


def lyapunov(X: np.ndarray) -> np.ndarray:
    a, b, c = V_COEFFS
    x1, x2 = X[..., 0], X[..., 1]
    return a * x1**2 + b * x1 * x2 + c * x2**2


def barrier(X: np.ndarray) -> np.ndarray:
    c0, c1, c2, c22, c11, c12 = H_COEFFS
    x1, x2 = X[..., 0], X[..., 1]
    return c0 + c1 * x1 + c2 * x2 + c22 * x2**2 + c11 * x1**2 + c12 * x1 * x2


def grid(resolution: float) -> np.ndarray:
    n = int(round((BOX[1] - BOX[0]) / resolution)) + 1
    ax = np.linspace(BOX[0], BOX[1], n)
    X1, X2 = np.meshgrid(ax, ax, indexing="ij")
    return np.stack([X1, X2], axis=-1)


@dataclass(frozen=True)
class Containment:
    lyapunov_cells: int
    barrier_cells: int
    lyapunov_outside_barrier: int
    barrier_outside_lyapunov: int
    worst_h_in_lyapunov: float

    @property
    def contained(self) -> bool:
        return self.lyapunov_outside_barrier == 0

    @property
    def growth(self) -> float:
        return self.barrier_cells / self.lyapunov_cells - 1.0


def containment(resolution: float = 0.01) -> Containment:
    P = grid(resolution)
    in_v = lyapunov(P) <= 1.0
    h = barrier(P)
    in_h = h >= 0.0
    return Containment(
        int(in_v.sum()),
        int(in_h.sum()),
        int((in_v & ~in_h).sum()),
        int((in_h & ~in_v).sum()),
        float(h[in_v].min()),
    )


def rk4(X: np.ndarray, dt: float) -> np.ndarray:
    k1 = vector_field(X)
    k2 = vector_field(X + 0.5 * dt * k1)
    k3 = vector_field(X + 0.5 * dt * k2)
    k4 = vector_field(X + dt * k3)
    return X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def sample_starts(n: int, margin: float, rng) -> np.ndarray:
    """Uniform starts in the box with ``h* >= margin`` (rejection sampling)."""
    out = np.empty((0, 2))
    while out.shape[0] < n:
        C = rng.uniform(BOX[0], BOX[1], size=(4 * n, 2))
        out = np.vstack([out, C[barrier(C) >= margin]])
    return out[:n]


def simulate(starts: np.ndarray, horizon: float, dt: float):
    """Integrate all starts together; returns per-trajectory min h and the min-h trace."""
    X = starts.copy()
    steps = int(round(horizon / dt))
    h = barrier(X)
    min_h = h.copy()
    trace = np.empty(steps + 1)
    trace[0] = h.min()
    for k in range(steps):
        X = rk4(X, dt)
        h = barrier(X)
        np.minimum(min_h, h, out=min_h)
        trace[k + 1] = h.min()
    return min_h, trace, X


def run_example1(cfg: ExperimentConfig):
    rng = np.random.default_rng(cfg.seed)
    cont = containment(cfg.ex1_resolution)
    starts = sample_starts(cfg.ex1_trajectories, cfg.ex1_start_margin, rng)
    min_h, trace, final = simulate(starts, cfg.ex1_horizon, cfg.ex1_dt)

    traj = RunRecord("example1_trajectories", ("id", "x1_0", "x2_0", "h_0", "min_h", "x1_T", "x2_T"))
    h0 = barrier(starts)
    for i in range(len(starts)):
        traj.append(i, starts[i, 0], starts[i, 1], h0[i], min_h[i], final[i, 0], final[i, 1])
    minh = RunRecord("example1_min_h", ("t", "min_h"))
    for k, v in enumerate(trace):
        minh.append(k * cfg.ex1_dt, v)

    summary = {
        "lyapunov_cells": cont.lyapunov_cells,
        "barrier_cells": cont.barrier_cells,
        "lyapunov_outside_barrier": cont.lyapunov_outside_barrier,
        "barrier_outside_lyapunov": cont.barrier_outside_lyapunov,
        "worst_h_in_lyapunov": cont.worst_h_in_lyapunov,
        "contained": cont.contained,
        "growth": cont.growth,
        "min_h": float(min_h.min()),
    }
    traj.summary.update(summary)
    return traj, minh, cont
