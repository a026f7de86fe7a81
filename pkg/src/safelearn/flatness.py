"""Differential-flatness feedforward, feedback law and reference shaping.

The flat output is position plus yaw.  Desired Euler rates are obtained by a
central difference of :func:`flat_to_attitude` along the reference, stepping
the acceleration with the reference jerk.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .quad import G0, THETA_GUARD, SingularAttitudeError, body_rates_from_euler, rotation_matrix

Z_W = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class FlatRef:
    r: np.ndarray
    v: np.ndarray
    a: np.ndarray
    j: np.ndarray
    psi: float = 0.0
    psi_dot: float = 0.0

    def __post_init__(self):
        for name in ("r", "v", "a", "j"):
            arr = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite reference component {name}")
            object.__setattr__(self, name, arr)


def poly_from_poles(poles) -> np.ndarray:
    """Row ``[k0, k1, k2]`` whose triple-integrator loop has the given poles."""
    c = np.real(np.poly(poles))
    if c.size != 4:
        raise ValueError("need exactly three poles")
    return np.array([c[3], c[2], c[1]])


@dataclass(frozen=True)
class Gains:
    kp: float = 4.0
    kd: float = 3.0
    kp_bar: float = 0.5
    pole_k: tuple[float, float, float] = tuple(poly_from_poles([-2.0, -2.5, -3.0]))

    def __post_init__(self):
        if min(self.kp, self.kd, self.kp_bar) < 0:
            raise ValueError("feedback gains must be non-negative")
        k0, k1, k2 = self.pole_k
        roots = np.roots([1.0, k2, k1, k0])
        if np.any(roots.real >= 0):
            raise ValueError(f"pole-placement gains {self.pole_k} give unstable poles {roots}")
        object.__setattr__(self, "pole_k", tuple(float(k) for k in self.pole_k))

    @classmethod
    def from_poles(cls, poles, **kw) -> "Gains":
        return cls(pole_k=tuple(poly_from_poles(poles)), **kw)


# the learning-based controller can run with lower feedback gains
GAIN_PRESETS = {
    "high": Gains(kp=4.0, kd=3.0, kp_bar=0.5),
    "low": Gains(kp=2.0, kd=1.5, kp_bar=0.25),
}


def _attitude_from_acc(acc, psi, g):
    cp, sp = math.cos(psi), math.sin(psi)
    ba = -acc[0] * cp - acc[1] * sp
    bb = -acc[2] + g
    bc = -acc[0] * sp + acc[1] * cp
    if bb == 0.0 and ba == 0.0 and bc == 0.0:
        raise SingularAttitudeError("free-fall reference: attitude undefined")
    theta = math.atan2(ba, bb)
    phi = math.atan2(bc, math.hypot(ba, bb))
    if abs(theta) >= THETA_GUARD:
        raise SingularAttitudeError(f"desired pitch {theta:.4f} at the singularity")
    return theta, phi


def flat_to_attitude(ref: FlatRef, gp_corr=None, g: float = G0) -> tuple[float, float]:
    """Desired ``(theta_d, phi_d)``; ``gp_corr`` is the learned acceleration offset."""
    acc = ref.a if gp_corr is None else ref.a - np.asarray(gp_corr, dtype=float)[:3]
    return _attitude_from_acc(acc, ref.psi, g)


def desired_euler_rates(ref: FlatRef, gp_corr=None, g: float = G0, h: float = 1e-3):
    """Central-difference ``(phi_dot_d, theta_dot_d)`` along the reference."""
    acc = ref.a if gp_corr is None else ref.a - np.asarray(gp_corr, dtype=float)[:3]
    th_p, ph_p = _attitude_from_acc(acc + h * ref.j, ref.psi + h * ref.psi_dot, g)
    th_m, ph_m = _attitude_from_acc(acc - h * ref.j, ref.psi - h * ref.psi_dot, g)
    return (ph_p - ph_m) / (2 * h), (th_p - th_m) / (2 * h)


def feedforward_parts(ref: FlatRef, mass: float, g: float = G0, gp_corr6=None, h: float = 1e-3):
    """:func:`feedforward` plus the desired ``(theta, phi, phi_dot, theta_dot)`` it used."""
    corr = np.zeros(6) if gp_corr6 is None else np.asarray(gp_corr6, dtype=float)
    acc = ref.a - corr[:3]
    theta_d, phi_d = _attitude_from_acc(acc, ref.psi, g)
    th_p, ph_p = _attitude_from_acc(acc + h * ref.j, ref.psi + h * ref.psi_dot, g)
    th_m, ph_m = _attitude_from_acc(acc - h * ref.j, ref.psi - h * ref.psi_dot, g)
    phid, thd = (ph_p - ph_m) / (2 * h), (th_p - th_m) / (2 * h)
    f = -mass * math.sqrt(acc[0] ** 2 + acc[1] ** 2 + (acc[2] - g) ** 2)
    rates = np.array([phid - corr[3], thd - corr[4], ref.psi_dot - corr[5]])
    omega = body_rates_from_euler(phi_d, theta_d) @ rates
    return np.array([f, *omega]), (theta_d, phi_d, phid, thd)


def feedforward(ref: FlatRef, mass: float, g: float = G0, gp_corr6=None, h: float = 1e-3) -> np.ndarray:
    """Inverted-dynamics control ``[f, wx, wy, wz]``, optionally GP corrected."""
    return feedforward_parts(ref, mass, g, gp_corr6, h)[0]


def feedback(q, ref: FlatRef, attitude_d, gains: Gains, rates_d=(0.0, 0.0, 0.0), rates=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Tracking correction added to the feedforward.

    ``attitude_d`` is ``(phi_d, theta_d, psi_d)``; ``rates_d``/``rates`` are the
    desired and current Euler-angle rates in the same order.
    """
    q = np.asarray(q, dtype=float)
    r, v = q[0:3], q[3:6]
    theta, phi, psi = q[6], q[7], q[8]
    bz = rotation_matrix(phi, theta, psi)[:, 2]
    f = gains.kp * float(bz @ (ref.r - r)) + gains.kd * float(bz @ (ref.v - v))
    att_err = np.asarray(attitude_d, dtype=float) - np.array([phi, theta, psi])
    att_err[2] = math.remainder(att_err[2], 2 * math.pi)
    rate_err = np.asarray(rates_d, dtype=float) - np.asarray(rates, dtype=float)
    cross = np.array([ref.r[1] - r[1], r[0] - ref.r[0], 0.0])
    omega = gains.kp * att_err + gains.kd * rate_err + gains.kp_bar * cross
    return np.array([f, *omega])


def pole_placement_ref(eta_hat, actual, pole_k) -> np.ndarray:
    """Shaped jerk per axis: ``eta_jerk - K [e, e_dot, e_ddot]``.

    ``eta_hat`` is ``(pos, vel, acc, jerk)`` of the nominal trajectory and
    ``actual`` is ``(pos, vel, acc)``.
    """
    pos, vel, acc, jerk = (np.asarray(x, dtype=float) for x in eta_hat)
    r, rd, rdd = (np.asarray(x, dtype=float) for x in actual)
    k0, k1, k2 = pole_k
    return jerk - (k0 * (r - pos) + k1 * (rd - vel) + k2 * (rdd - acc))


@dataclass(frozen=True)
class Lissajous:
    """3D loop ``center + amp * sin(2 pi t / period + phase)`` per axis."""

    center: tuple[float, float, float] = (0.0, 0.0, -1.0)
    amplitude: tuple[float, float, float] = (1.0, 1.0, 0.3)
    period: tuple[float, float, float] = (12.0, 6.0, 12.0)
    phase: tuple[float, float, float] = (0.0, 0.0, math.pi / 2)

    def derivatives(self, t: float):
        c = np.asarray(self.center)
        A = np.asarray(self.amplitude)
        w = 2 * np.pi / np.asarray(self.period)
        arg = w * t + np.asarray(self.phase)
        s, co = np.sin(arg), np.cos(arg)
        return c + A * s, A * w * co, -A * w**2 * s, -A * w**3 * co

    def ref(self, t: float) -> FlatRef:
        return FlatRef(*self.derivatives(t))


@dataclass(frozen=True)
class Quintic:
    """Scalar point-to-point polynomial with position/velocity/acceleration boundary values."""

    coeffs: np.ndarray
    duration: float

    @classmethod
    def fit(cls, p0, v0, a0, p1, v1, a1, T: float) -> "Quintic":
        if T <= 0:
            raise ValueError("duration must be positive")
        M = np.array(
            [
                [1, 0, 0, 0, 0, 0],
                [0, 1, 0, 0, 0, 0],
                [0, 0, 2, 0, 0, 0],
                [1, T, T**2, T**3, T**4, T**5],
                [0, 1, 2 * T, 3 * T**2, 4 * T**3, 5 * T**4],
                [0, 0, 2, 6 * T, 12 * T**2, 20 * T**3],
            ],
            dtype=float,
        )
        return cls(np.linalg.solve(M, [p0, v0, a0, p1, v1, a1]), float(T))

    def __call__(self, t: float):
        """``(pos, vel, acc, jerk)``; held at the end state after the duration."""
        if t >= self.duration:
            T = self.duration
            p, v, _, _ = self._eval(T)
            return p + v * (t - T), v, 0.0, 0.0
        return self._eval(max(t, 0.0))

    def _eval(self, t):
        c = self.coeffs
        p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))))
        v = c[1] + t * (2 * c[2] + t * (3 * c[3] + t * (4 * c[4] + t * 5 * c[5])))
        a = 2 * c[2] + t * (6 * c[3] + t * (12 * c[4] + t * 20 * c[5]))
        j = 6 * c[3] + t * (24 * c[4] + t * 60 * c[5])
        return p, v, a, j
