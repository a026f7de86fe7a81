"""3D quadrotor plant: rotation algebra, nominal and mismatched dynamics, RK4.

State arrays follow ``q = [x, y, z, vx, vy, vz, theta, phi, psi]`` and control
arrays ``u = [f, wx, wy, wz]``.  The world z axis points down, gravity enters
as ``+g z_w`` and hovering takes negative thrust ``f = -m g``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

G0 = 9.81
THETA_GUARD = math.pi / 2 - 1e-3

IX_POS = slice(0, 3)
IX_VEL = slice(3, 6)
IX_THETA, IX_PHI, IX_PSI = 6, 7, 8

# the six channels carrying unmodeled dynamics: acceleration and Euler rates
# (phi_dot, theta_dot, psi_dot), as indices into the state derivative
RESIDUAL_CHANNELS = (3, 4, 5, IX_PHI, IX_THETA, IX_PSI)


class SingularAttitudeError(ArithmeticError):
    pass


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2 * math.pi)
    if w <= 0:
        w += 2 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class QuadState:
    r: tuple[float, float, float] = (0.0, 0.0, 0.0)
    v: tuple[float, float, float] = (0.0, 0.0, 0.0)
    phi: float = 0.0
    theta: float = 0.0
    psi: float = 0.0

    def __post_init__(self):
        if abs(self.theta) >= THETA_GUARD:
            raise SingularAttitudeError(f"pitch {self.theta:.6f} at the sec(theta) singularity")
        object.__setattr__(self, "phi", wrap_angle(self.phi))
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def to_array(self) -> np.ndarray:
        return np.array([*self.r, *self.v, self.theta, self.phi, self.psi], dtype=float)

    @classmethod
    def from_array(cls, q) -> "QuadState":
        q = [float(c) for c in q]
        return cls(tuple(q[0:3]), tuple(q[3:6]), phi=q[7], theta=q[6], psi=q[8])


@dataclass(frozen=True)
class QuadControl:
    f: float
    omega: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_array(self) -> np.ndarray:
        return np.array([self.f, *self.omega], dtype=float)

    @classmethod
    def from_array(cls, u) -> "QuadControl":
        return cls(float(u[0]), (float(u[1]), float(u[2]), float(u[3])))


@dataclass(frozen=True)
class PlantConfig:
    nominal_mass: float = 1.0
    mass_ratio: float = 1.4
    gravity: float = G0
    wind_accel: tuple[float, float, float] = (-0.1 * G0, 0.0, 0.0)
    drag_coeff: float = 0.0
    thrust_box: tuple[float, float] | None = None
    rate_box: tuple[float, float, float] = (4.0, 4.0, 4.0)

    def __post_init__(self):
        if self.mass_ratio <= 0 or self.nominal_mass <= 0:
            raise ValueError("masses must be positive")
        if self.thrust_box is None:
            mg = self.nominal_mass * self.gravity
            object.__setattr__(self, "thrust_box", (-1.8 * mg, 0.0))
        lo, hi = self.thrust_box
        if not lo < hi:
            raise ValueError("thrust box needs f_min < f_max")
        if min(self.rate_box) <= 0:
            raise ValueError("rate box must be positive")
        object.__setattr__(self, "wind_accel", tuple(float(w) for w in self.wind_accel))

    @property
    def true_mass(self) -> float:
        return self.nominal_mass * self.mass_ratio

    @property
    def control_lo(self) -> np.ndarray:
        return np.array([self.thrust_box[0], *(-r for r in self.rate_box)])

    @property
    def control_hi(self) -> np.ndarray:
        return np.array([self.thrust_box[1], *self.rate_box])


def rotation_matrix(phi: float, theta: float, psi: float) -> np.ndarray:
    """Body-to-world rotation, ZYX Euler convention."""
    sf, cf = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    sp, cp = math.sin(psi), math.cos(psi)
    return np.array(
        [
            [ct * cp, sf * st * cp - cf * sp, cf * st * cp + sf * sp],
            [ct * sp, sf * st * sp + cf * cp, cf * st * sp - sf * cp],
            [-st, sf * ct, cf * ct],
        ]
    )


def euler_rate_matrix(phi: float, theta: float) -> np.ndarray:
    """Maps body rates to (phi_dot, theta_dot, psi_dot)."""
    if abs(theta) >= THETA_GUARD:
        raise SingularAttitudeError(f"pitch {theta:.6f} at the sec(theta) singularity")
    sf, cf = math.sin(phi), math.cos(phi)
    tt, sc = math.tan(theta), 1.0 / math.cos(theta)
    return np.array([[1.0, sf * tt, cf * tt], [0.0, cf, -sf], [0.0, sf * sc, cf * sc]])


def body_rates_from_euler(phi: float, theta: float) -> np.ndarray:
    """Inverse of :func:`euler_rate_matrix`, as used by the flatness feedforward."""
    sf, cf = math.sin(phi), math.cos(phi)
    st, ct = math.sin(theta), math.cos(theta)
    return np.array([[1.0, 0.0, -st], [0.0, cf, sf * ct], [0.0, -sf, cf * ct]])


def _derivative(q, u, mass, g, wind, drag):
    x, y, z, vx, vy, vz, th, ph, ps = q
    if abs(th) >= THETA_GUARD:
        raise SingularAttitudeError(f"pitch {th:.6f} at the sec(theta) singularity in state {list(q)}")
    f, wx, wy, wz = u
    sf, cf = math.sin(ph), math.cos(ph)
    st, ct = math.sin(th), math.cos(th)
    sp, cp = math.sin(ps), math.cos(ps)
    a = f / mass
    ax = a * (cf * st * cp + sf * sp) + wind[0]
    ay = a * (cf * st * sp - sf * cp) + wind[1]
    az = a * (cf * ct) + g + wind[2]
    if drag:
        ax -= drag * abs(vx) * vx
        ay -= drag * abs(vy) * vy
        az -= drag * abs(vz) * vz
    tt = st / ct
    phid = wx + sf * tt * wy + cf * tt * wz
    thd = cf * wy - sf * wz
    psd = (sf * wy + cf * wz) / ct
    return np.array([vx, vy, vz, ax, ay, az, thd, phid, psd])


_NO_WIND = (0.0, 0.0, 0.0)


def nominal_derivative(q, u, cfg: PlantConfig, mass: float | None = None) -> np.ndarray:
    """Model dynamics with the computation mass (or an explicit ``mass``), no wind."""
    m = cfg.nominal_mass if mass is None else mass
    return _derivative(q, u, m, cfg.gravity, _NO_WIND, 0.0)


def true_derivative(q, u, cfg: PlantConfig) -> np.ndarray:
    """Plant dynamics: true mass, constant wind and optional quadratic drag."""
    return _derivative(q, u, cfg.true_mass, cfg.gravity, cfg.wind_accel, cfg.drag_coeff)


def measured_residual(q, u, qdot_observed, cfg: PlantConfig, mass: float | None = None) -> np.ndarray:
    """Observed minus model derivative on the six GP channels."""
    d = np.asarray(qdot_observed, dtype=float) - nominal_derivative(q, u, cfg, mass)
    return d[list(RESIDUAL_CHANNELS)]


def clamp_control(u, cfg: PlantConfig) -> np.ndarray:
    return np.clip(np.asarray(u, dtype=float), cfg.control_lo, cfg.control_hi)


def integrate_step(q, u, dt: float, derivative_fn: Callable) -> np.ndarray:
    """One classical RK4 step with ``u`` held constant; angles wrapped afterwards."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    q = np.asarray(q, dtype=float)
    k1 = derivative_fn(q, u)
    k2 = derivative_fn(q + 0.5 * dt * k1, u)
    k3 = derivative_fn(q + 0.5 * dt * k2, u)
    k4 = derivative_fn(q + dt * k3, u)
    out = q + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    out[IX_PHI] = wrap_angle(out[IX_PHI])
    out[IX_PSI] = wrap_angle(out[IX_PSI])
    if abs(out[IX_THETA]) >= THETA_GUARD:
        raise SingularAttitudeError(f"pitch left the admissible range: {out[IX_THETA]:.6f}")
    return out
