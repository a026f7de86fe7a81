"""Exact solver for the safety-filter QP.

    minimize  ||u - u_hat||^2   subject to   a^T u >= b,   lo <= u <= hi

The minimizer has the form ``u(lam) = clip(u_hat + lam * a, lo, hi)`` with
``lam >= 0``; ``a^T u(lam)`` is piecewise linear and non-decreasing in ``lam``,
so the active set is found by walking the sorted breakpoints where a
coordinate enters or leaves its bound.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class QpStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class FilterQp:
    u_hat: np.ndarray
    a: np.ndarray
    b: float
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        for name in ("u_hat", "a", "lo", "hi"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        m = self.u_hat.size
        if not (self.a.size == self.lo.size == self.hi.size == m) or not 1 <= m <= 8:
            raise ValueError("FilterQp vectors must share a length between 1 and 8")
        if np.any(self.lo > self.hi):
            raise ValueError("empty box: lo > hi")


def max_over_box(a, lo, hi) -> float:
    """max of a^T u over the box, attained at a corner."""
    a = np.asarray(a, dtype=float)
    return float(np.sum(np.where(a > 0, a * np.asarray(hi), a * np.asarray(lo))))


def max_over_box_batch(A: np.ndarray, lo, hi) -> np.ndarray:
    """Row-wise :func:`max_over_box` for an ``(N, m)`` array."""
    return np.where(A > 0, A * np.asarray(hi), A * np.asarray(lo)).sum(axis=1)


def argmax_over_box(a, lo, hi) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    # zero entries take the box midpoint so the choice is deterministic
    return np.where(a > 0, hi, np.where(a < 0, lo, 0.5 * (np.asarray(lo) + np.asarray(hi))))


def solve(p: FilterQp) -> tuple[np.ndarray, QpStatus]:
    u0 = np.clip(p.u_hat, p.lo, p.hi)
    a = p.a
    if a @ u0 >= p.b:
        return u0, QpStatus.OPTIMAL
    if max_over_box(a, p.lo, p.hi) < p.b:
        return u0, QpStatus.INFEASIBLE

    # breakpoints: coordinate j is free for lam in [enter_j, leave_j]
    nz = a != 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = np.where(nz, (p.lo - p.u_hat) / a, -np.inf)
        t_hi = np.where(nz, (p.hi - p.u_hat) / a, np.inf)
    enter = np.where(nz, np.minimum(t_lo, t_hi), -np.inf)
    leave = np.where(nz, np.maximum(t_lo, t_hi), np.inf)
    points = np.unique(np.concatenate([[0.0], enter[enter > 0], leave[leave > 0]]))
    points = points[np.isfinite(points)]

    def g(lam: float) -> float:
        return float(a @ np.clip(p.u_hat + lam * a, p.lo, p.hi))

    prev_t, prev_g = 0.0, g(0.0)
    for t in points[1:]:
        gt = g(t)
        if gt >= p.b:
            break
        prev_t, prev_g = t, gt
    else:
        t, gt = None, None

    # on [prev_t, t] the free set is fixed, so g is linear there
    lam_mid = prev_t + 1.0 if t is None else 0.5 * (prev_t + t)
    free = (enter < lam_mid) & (lam_mid < leave) & nz
    slope = float(np.sum(a[free] ** 2))
    if slope <= 0.0:
        lam = t
    else:
        lam = prev_t + (p.b - prev_g) / slope
        if t is not None:
            lam = min(lam, t)
    u = np.clip(p.u_hat + lam * a, p.lo, p.hi)
    return u, QpStatus.OPTIMAL


def kkt_residual(p: FilterQp, u: np.ndarray) -> float:
    """Largest violation of the KKT conditions at ``u`` (0 for the exact optimum)."""
    a = p.a
    slack = float(a @ u - p.b)
    grad = 2.0 * (u - p.u_hat)
    # multiplier of the halfspace estimated from free coordinates
    free = (u > p.lo + 1e-12) & (u < p.hi - 1e-12) & (a != 0)
    lam = float(grad[free] @ a[free] / (a[free] @ a[free])) if free.any() else 0.0
    if abs(slack) > 1e-9:
        lam = 0.0
    r = grad - lam * a
    viol = [max(0.0, -slack), max(0.0, -lam), abs(lam * slack)]
    for j in range(u.size):
        if p.lo[j] + 1e-12 < u[j] < p.hi[j] - 1e-12:
            viol.append(abs(r[j]))
        elif u[j] <= p.lo[j] + 1e-12:
            viol.append(max(0.0, -r[j]))
        else:
            viol.append(max(0.0, r[j]))
    return max(viol)
