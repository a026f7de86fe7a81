"""Trajectory tracking with and without online GP correction."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .emit import RunRecord
from .flatness import FlatRef, Gains, feedback, feedforward_parts, pole_placement_ref
from .gp import GpModel, admit_shared, empty_model, posterior_shared
from .quad import (
    RESIDUAL_CHANNELS,
    clamp_control,
    euler_rate_matrix,
    integrate_step,
    measured_residual,
    true_derivative,
)

# GP inputs: velocity and attitude (q') or the full state (q)
FEATURE_SETS = {
    "q_prime": ((3, 4, 5, 6, 7, 8), (1.0, 1.0, 1.0, 0.5, 0.5, 0.5)),
    "q": (tuple(range(9)), (2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5)),
}


@dataclass(frozen=True)
class FlatnessController:
    """Feedforward plus the printed feedback law.

    The law's current Euler rates are those produced by the command itself,
    ``W(phi, theta) omega``, so the rate term is solved implicitly:
    ``(I + kd W) omega = omega_ff + omega_fb(rates = 0)``.  Feeding back the
    previous command instead gives ``omega_k ~ -kd omega_{k-1}``, which
    diverges for ``kd > 1``.
    """

    gains: Gains
    mass: float
    gravity: float

    def __call__(self, q, ref: FlatRef, corr6=None) -> np.ndarray:
        corr = np.zeros(6) if corr6 is None else np.asarray(corr6, dtype=float)
        u, (theta_d, phi_d, phid_d, thd_d) = feedforward_parts(ref, self.mass, self.gravity, corr)
        u = u + feedback(q, ref, (phi_d, theta_d, ref.psi), self.gains, (phid_d, thd_d, ref.psi_dot))
        W = euler_rate_matrix(q[7], q[6])
        u[1:] = np.linalg.solve(np.eye(3) + self.gains.kd * W, u[1:])
        return u


TRACK_COLUMNS = (
    "t",
    "x", "y", "z",
    "x_ref", "y_ref", "z_ref",
    "err",
    "f", "wx", "wy", "wz",
    *(f"gp_mean_{c}" for c in range(6)),
    *(f"gp_std_{c}" for c in range(6)),
    "gp_points",
)


def _residual_models(cfg: ExperimentConfig) -> list[GpModel]:
    idx, scales = FEATURE_SETS[cfg.gp_features]
    hyper = cfg.kernel(len(idx), scales)
    return [empty_model(hyper, cfg.gp_budget) for _ in RESIDUAL_CHANNELS]


def track(cfg: ExperimentConfig, use_gp: bool) -> tuple[RunRecord, np.ndarray]:
    """One closed-loop run; returns the record and per-step GP wall times (s)."""
    plant = cfg.plant()
    ctrl = FlatnessController(cfg.gains(), plant.nominal_mass, plant.gravity)
    K = ctrl.gains.pole_k
    path = cfg.reference()
    rng = np.random.default_rng(cfg.seed)
    dt = cfg.dt

    def true_fn(q, u):
        return true_derivative(q, u, plant)

    p0, v0, a0, _ = path.derivatives(0.0)
    q = np.zeros(9)
    q[0:3], q[3:6] = p0, v0
    a_cmd = a0.copy()
    models = _residual_models(cfg) if use_gp else None
    feat_idx = list(FEATURE_SETS[cfg.gp_features][0])
    rec = RunRecord("tracking_gp" if use_gp else "tracking_nominal", TRACK_COLUMNS)
    times = np.zeros(cfg.steps)

    for k in range(cfg.steps):
        t = k * dt
        eta = path.derivatives(t)
        if cfg.use_pole_placement:
            jerk = pole_placement_ref(eta, (q[0:3], q[3:6], a_cmd), K)
        else:
            a_cmd, jerk = eta[2].copy(), eta[3]
        ref = FlatRef(eta[0], eta[1], a_cmd, jerk)

        corr, std = np.zeros(6), np.zeros(6)
        if use_gp:
            t0 = time.perf_counter()
            feat = q[feat_idx][None, :]
            corr, var = posterior_shared(models, feat)
            std = np.sqrt(var)
            times[k] += time.perf_counter() - t0

        u = clamp_control(ctrl(q, ref, corr), plant)
        q_next = integrate_step(q, u, dt, true_fn)

        if use_gp:
            qdot = true_fn(q, u)
            y = measured_residual(q, u, qdot, plant, plant.nominal_mass)
            y = y + cfg.measurement_noise * rng.standard_normal(6)
            t0 = time.perf_counter()
            feat = q[feat_idx]
            models = admit_shared(models, feat, y)
            times[k] += time.perf_counter() - t0

        err = float(np.linalg.norm(q[0:3] - eta[0]))
        n_gp = models[0].size if use_gp else 0
        rec.append(t, *q[0:3], *eta[0], err, *u, *corr, *std, n_gp)
        q = q_next
        a_cmd = a_cmd + jerk * dt

    rec.summary["rms_final_half"] = rms_final_half(rec)
    return rec, times


def rms_final_half(rec: RunRecord) -> float:
    err = rec.column("err")
    return float(np.sqrt(np.mean(err[len(err) // 2 :] ** 2)))


def timing_summary(times: np.ndarray) -> dict:
    half = len(times) // 2
    ms = times * 1e3
    return {
        "mean_ms": float(ms.mean()),
        "p99_ms": float(np.percentile(ms, 99)),
        "max_ms": float(ms.max()),
        "first_half_mean_ms": float(ms[:half].mean()),
        "second_half_mean_ms": float(ms[half:].mean()),
    }


def run_tracking(cfg: ExperimentConfig):
    """Same reference with and without learning; returns both records and GP timing."""
    with_gp, times = track(cfg, True)
    without, _ = track(cfg, False)
    ratio = with_gp.summary["rms_final_half"] / without.summary["rms_final_half"]
    with_gp.summary["rms_ratio"] = ratio
    return with_gp, without, times
