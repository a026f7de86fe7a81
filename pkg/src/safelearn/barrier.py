"""Barrier certificates under GP uncertainty.

The robust barrier margin at a state ``x`` is

    max_u dh.g(x)u + dh.m(x) - k_delta sum_j |dh_j| sigma_j(x) + dh.f(x) + gamma h(x)

where ``m``/``sigma`` come from the residual model.  A set is certified on a
lattice when every lattice point clears a Lipschitz threshold.  Interior
points use ``(L_hdot + gamma L_h) tau``; points whose ``gamma h`` is below that
value only need ``h_dot >= 0``, because the margin of any barrier vanishes at
boundary points where the gradient is orthogonal to the flow.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .gp import GpModel, posterior_batch
from .qp import FilterQp, QpStatus, argmax_over_box, max_over_box_batch, solve
from .quad import G0

log = logging.getLogger(__name__)

LIPSCHITZ_SAFETY = 1.5
_EQ_TOL = 1e-12
_PREDICT_CHUNK = 8192


# -- certificate families ----------------------------------------------------


@dataclass(frozen=True)
class QuadEllipsoid:
    """``h_mu = 1 - (z - zc)^2/az - mu vz^2 - x^2/ax - y^2/ay - vx^2/avx - vy^2/avy``.

    Lives on the 9-dim quadrotor state; ``mu`` sets the admissible vertical
    speed and the certified volume scales as ``mu^-1/2``.
    """

    z_center: float = -0.8
    z_axis_sq: float = 0.36
    xy_axis_sq: float = 0.16
    vxy_axis_sq: float = 0.25
    mu_min: float = 1e-6

    name = "quad-ellipsoid"

    def check(self, mu: float) -> None:
        if not mu > self.mu_min:
            raise ValueError(f"mu must exceed {self.mu_min}, got {mu}")

    def value(self, X: np.ndarray, mu: float) -> np.ndarray:
        X = np.atleast_2d(X)
        return (
            1.0
            - (X[:, 2] - self.z_center) ** 2 / self.z_axis_sq
            - mu * X[:, 5] ** 2
            - (X[:, 0] ** 2 + X[:, 1] ** 2) / self.xy_axis_sq
            - (X[:, 3] ** 2 + X[:, 4] ** 2) / self.vxy_axis_sq
        )

    def grad(self, X: np.ndarray, mu: float) -> np.ndarray:
        X = np.atleast_2d(X)
        D = np.zeros_like(X, dtype=float)
        D[:, 0] = -2 * X[:, 0] / self.xy_axis_sq
        D[:, 1] = -2 * X[:, 1] / self.xy_axis_sq
        D[:, 2] = -2 * (X[:, 2] - self.z_center) / self.z_axis_sq
        D[:, 3] = -2 * X[:, 3] / self.vxy_axis_sq
        D[:, 4] = -2 * X[:, 4] / self.vxy_axis_sq
        D[:, 5] = -2 * mu * X[:, 5]
        return D

    def volume(self, mu: float) -> float:
        # relative (z, vz) area; the remaining axes do not depend on mu
        return math.pi * math.sqrt(self.z_axis_sq) / math.sqrt(mu)

    def vz_extent(self, mu: float) -> float:
        return 1.0 / math.sqrt(mu)

    def z_extent(self) -> tuple[float, float]:
        a = math.sqrt(self.z_axis_sq)
        return self.z_center - a, self.z_center + a


@dataclass(frozen=True)
class BarrierCertificate:
    family: QuadEllipsoid
    mu: float
    gamma: float = 1.0

    def __post_init__(self):
        self.family.check(self.mu)
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    def h(self, X) -> np.ndarray:
        return self.family.value(X, self.mu)

    def grad(self, X) -> np.ndarray:
        return self.family.grad(X, self.mu)

    def with_mu(self, mu: float) -> "BarrierCertificate":
        return BarrierCertificate(self.family, mu, self.gamma)

    def volume(self) -> float:
        return self.family.volume(self.mu)

    def to_dict(self) -> dict:
        return {"family": self.family.name, "mu": self.mu, "gamma": self.gamma}


# -- dynamics and residual models -------------------------------------------


@dataclass(frozen=True)
class QuadAffine:
    """Control-affine form ``f(x) + g(x) u`` of the quadrotor model."""

    mass: float
    gravity: float = G0

    def f(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        F = np.zeros_like(X, dtype=float)
        F[:, 0:3] = X[:, 3:6]
        F[:, 5] = self.gravity
        return F

    def g(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        th, ph, ps = X[:, 6], X[:, 7], X[:, 8]
        sf, cf = np.sin(ph), np.cos(ph)
        st, ct = np.sin(th), np.cos(th)
        sp, cp = np.sin(ps), np.cos(ps)
        Gm = np.zeros((X.shape[0], X.shape[1], 4))
        Gm[:, 3, 0] = (cf * st * cp + sf * sp) / self.mass
        Gm[:, 4, 0] = (cf * st * sp - sf * cp) / self.mass
        Gm[:, 5, 0] = cf * ct / self.mass
        tt, sc = st / ct, 1.0 / ct
        # state order is (theta, phi, psi) at indices 6, 7, 8
        Gm[:, 7, 1], Gm[:, 7, 2], Gm[:, 7, 3] = 1.0, sf * tt, cf * tt
        Gm[:, 6, 2], Gm[:, 6, 3] = cf, -sf
        Gm[:, 8, 2], Gm[:, 8, 3] = sf * sc, cf * sc
        return Gm


class GpResidual:
    """Per-channel GP models of the unmodeled dynamics.

    ``channels`` maps a state-derivative index to a :class:`GpModel`; all models
    read the features ``X[:, feature_idx]``.  Channels without a model are
    treated as exactly known: zero spread and mean ``offset`` (default zero).
    """

    def __init__(self, channels: dict[int, GpModel], feature_idx: Sequence[int], offset=None):
        self.channels = dict(channels)
        self.feature_idx = tuple(feature_idx)
        self.offset = None if offset is None else np.asarray(offset, dtype=float)

    def features(self, X) -> np.ndarray:
        return np.atleast_2d(X)[:, self.feature_idx]

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        mean = np.zeros_like(X, dtype=float)
        if self.offset is not None:
            mean += self.offset
        std = np.zeros_like(X, dtype=float)
        F = self.features(X)
        for ch, model in self.channels.items():
            # chunked so large grids do not build huge kernel blocks
            for s in range(0, F.shape[0], _PREDICT_CHUNK):
                m, v = posterior_batch(model, F[s : s + _PREDICT_CHUNK])
                mean[s : s + _PREDICT_CHUNK, ch] += m
                std[s : s + _PREDICT_CHUNK, ch] = np.sqrt(v)
        return mean, std

    def with_models(self, channels: dict[int, GpModel]) -> "GpResidual":
        return GpResidual(channels, self.feature_idx, self.offset)


class OracleResidual:
    """Exact residual with zero uncertainty."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn

    def predict(self, X) -> tuple[np.ndarray, np.ndarray]:
        X = np.atleast_2d(X)
        mean = np.asarray(self.fn(X), dtype=float).reshape(X.shape)
        return mean, np.zeros_like(mean)


def zero_residual() -> OracleResidual:
    return OracleResidual(lambda X: np.zeros_like(X, dtype=float))


@dataclass(frozen=True)
class SafetyProblem:
    """Everything the margin needs besides the certificate and the state."""

    model: QuadAffine
    residual: object
    k_delta: float
    lo: np.ndarray
    hi: np.ndarray

    def with_residual(self, residual) -> "SafetyProblem":
        return SafetyProblem(self.model, residual, self.k_delta, self.lo, self.hi)


# -- margins -----------------------------------------------------------------


def margin_terms(cert: BarrierCertificate, X, prob: SafetyProblem) -> tuple[np.ndarray, np.ndarray]:
    """``(margin, h)`` at each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    D = cert.grad(X)
    h = cert.h(X)
    a = np.einsum("ni,nim->nm", D, prob.model.g(X))
    mean, std = prob.residual.predict(X)
    G = (
        max_over_box_batch(a, prob.lo, prob.hi)
        + np.einsum("ni,ni->n", D, mean)
        - prob.k_delta * np.einsum("ni,ni->n", np.abs(D), std)
        + np.einsum("ni,ni->n", D, prob.model.f(X))
        + cert.gamma * h
    )
    return G, h


def margin(cert: BarrierCertificate, x, prob: SafetyProblem) -> float:
    return float(margin_terms(cert, x, prob)[0][0])


# -- grids -------------------------------------------------------------------


@dataclass(frozen=True)
class StateGrid:
    """Lattice over a few state axes, other coordinates fixed at ``base``.

    Values are integer multiples of the spacing so zero is always on the lattice.
    ``mask`` marks the points that get checked; ``points`` are those in
    lexicographic order.  After :meth:`restrict` the mask is the safe set plus
    a one-cell halo, so every cell touching the set has all its corners
    checked; ``inside`` marks the safe-set points alone.
    """

    axes: tuple[int, ...]
    values: tuple[np.ndarray, ...]
    spacing: np.ndarray
    base: np.ndarray
    mask: np.ndarray
    inside: np.ndarray | None = None

    @classmethod
    def box(cls, axes, lo, hi, spacing, base) -> "StateGrid":
        spacing = np.asarray(spacing, dtype=float)
        vals = []
        for l, h, s in zip(lo, hi, spacing):
            k0 = math.ceil(l / s - 1e-9)
            k1 = math.floor(h / s + 1e-9)
            vals.append(np.arange(k0, k1 + 1) * s)
        shape = tuple(v.size for v in vals)
        return cls(tuple(axes), tuple(vals), spacing, np.asarray(base, dtype=float), np.ones(shape, bool))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(v.size for v in self.values)

    @property
    def tau(self) -> float:
        """Cell diagonal: every point of the box is within tau/2 of the lattice."""
        return float(np.linalg.norm(self.spacing))

    def lattice(self) -> np.ndarray:
        mesh = np.meshgrid(*self.values, indexing="ij")
        X = np.tile(self.base, (mesh[0].size, 1))
        for ax, m in zip(self.axes, mesh):
            X[:, ax] = m.ravel()
        return X

    def restrict(self, cert: BarrierCertificate) -> "StateGrid":
        inside = cert.h(self.lattice()).reshape(self.shape) >= 0.0
        return StateGrid(self.axes, self.values, self.spacing, self.base, _dilate(inside), inside)

    @property
    def points(self) -> np.ndarray:
        return self.lattice()[self.mask.ravel()]

    @property
    def inside_points(self) -> np.ndarray:
        inside = self.mask if self.inside is None else self.inside
        return self.lattice()[inside.ravel()]

    def __len__(self) -> int:
        return int(self.mask.sum())

    def coords(self, X) -> np.ndarray:
        """Grid-axis coordinates of full states."""
        return np.atleast_2d(X)[:, self.axes]


def _dilate(mask: np.ndarray) -> np.ndarray:
    """Grow a boolean mask by one cell, diagonals included."""
    out = mask.copy()
    padded = np.pad(mask, 1)
    for shift in itertools.product((0, 1, 2), repeat=mask.ndim):
        out |= padded[tuple(slice(k, k + n) for k, n in zip(shift, mask.shape))]
    return out


class LipschitzBounds(NamedTuple):
    L_h: float
    L_hdot: float

    def deduction(self, gamma: float, tau: float) -> float:
        return (self.L_hdot + gamma * self.L_h) * tau


def _field_slope(values: np.ndarray, mask: np.ndarray, spacing: np.ndarray) -> float:
    full = np.full(mask.shape, np.nan)
    full[mask] = values
    slopes = []
    for axis, s in enumerate(spacing):
        d = np.abs(np.diff(full, axis=axis)) / s
        d = d[np.isfinite(d)]
        slopes.append(d.max() if d.size else 0.0)
    return float(np.linalg.norm(slopes))


def estimate_lipschitz(cert, grid: StateGrid, prob: SafetyProblem, margins=None) -> LipschitzBounds:
    """Finite-difference slopes over adjacent in-set lattice pairs, times 1.5."""
    if len(grid) == 0:
        return LipschitzBounds(0.0, 0.0)
    if margins is None:
        margins = margin_terms(cert, grid.points, prob)
    G, h = margins
    L_h = _field_slope(h, grid.mask, grid.spacing)
    L_hdot = _field_slope(G - cert.gamma * h, grid.mask, grid.spacing)
    return LipschitzBounds(LIPSCHITZ_SAFETY * L_h, LIPSCHITZ_SAFETY * L_hdot)


def thresholds(h: np.ndarray, gamma: float, deduction: float) -> np.ndarray:
    return np.minimum(deduction, gamma * h)


class VerifyResult(NamedTuple):
    passed: bool
    worst_slack: float
    worst_point: np.ndarray | None
    lipschitz: LipschitzBounds
    n_points: int


def verify_grid(cert, grid: StateGrid, prob: SafetyProblem, lips: LipschitzBounds | None = None) -> VerifyResult:
    """Check the lattice condition at every in-set point of ``grid``.

    ``grid`` must already be restricted to ``cert``'s safe set; halo points
    outside the set only need a non-negative barrier rate.
    """
    if len(grid) == 0:
        return VerifyResult(True, math.inf, None, lips or LipschitzBounds(0.0, 0.0), 0)
    P = grid.points
    G, h = margin_terms(cert, P, prob)
    if lips is None:
        lips = estimate_lipschitz(cert, grid, prob, (G, h))
    slack = G - thresholds(h, cert.gamma, lips.deduction(cert.gamma, grid.tau))
    i = int(np.argmin(slack))
    return VerifyResult(bool(slack[i] >= -_EQ_TOL), float(slack[i]), P[i], lips, len(P))


@dataclass
class CoverageSet:
    """Greedy ball cover of the in-set lattice.

    Each emitted sample certifies a continuous ball of radius ``margin / L``;
    the stored ``radius`` is what is left after reserving one cell diagonal,
    so every lattice point within it is certified together with its cell.
    """

    points: np.ndarray
    margins: np.ndarray
    radii: np.ndarray
    certified: bool
    grid_count: int
    lipschitz: LipschitzBounds
    tau: float
    axes: tuple[int, ...] = ()

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def covers(self, X) -> np.ndarray:
        """Membership of states in the union of closed balls (grid-axis metric)."""
        C = np.atleast_2d(X)[:, self.axes]
        S = self.points[:, self.axes]
        d = np.linalg.norm(C[:, None, :] - S[None, :, :], axis=2)
        return np.any(d <= self.radii[None, :] + _EQ_TOL, axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*(f"x{a}" for a in self.axes), "margin", "radius"])
            for p, m, r in zip(self.points, self.margins, self.radii):
                w.writerow([*(f"{p[a]:.10g}" for a in self.axes), f"{m:.10g}", f"{r:.10g}"])


def adaptive_cover(cert, grid: StateGrid, prob: SafetyProblem, lips: LipschitzBounds | None = None) -> CoverageSet:
    """Lexicographic sweep that skips points already inside an emitted ball."""
    P = grid.points
    n = len(P)
    if n == 0:
        return CoverageSet(P, np.zeros(0), np.zeros(0), True, 0, lips or LipschitzBounds(0.0, 0.0), grid.tau, grid.axes)
    G, h = margin_terms(cert, P, prob)
    if lips is None:
        lips = estimate_lipschitz(cert, grid, prob, (G, h))
    tau = grid.tau
    L = lips.L_hdot + cert.gamma * lips.L_h
    if L > 0:
        radius = np.maximum(G / L - tau, 0.0)
    else:
        radius = np.where(G >= 0, np.inf, 0.0)
    ok = G - thresholds(h, cert.gamma, lips.deduction(cert.gamma, tau)) >= -_EQ_TOL

    C = grid.coords(P)
    covered = np.zeros(n, bool)
    emitted = np.zeros(n, bool)
    # only points with a positive radius can cover others; the rest emit
    # exactly when nothing earlier covered them
    for i in np.flatnonzero(radius > 0):
        if covered[i]:
            continue
        emitted[i] = True
        later = slice(i + 1, n)
        d = np.linalg.norm(C[later] - C[i], axis=1)
        covered[later] |= d <= radius[i] + _EQ_TOL
    emitted |= ~covered
    idx = np.flatnonzero(emitted)
    return CoverageSet(
        P[idx], G[idx], radius[idx], bool(ok[idx].all()), n, lips, tau, grid.axes
    )


# -- certificate expansion and exploration -----------------------------------


class ExpansionResult(NamedTuple):
    cert: BarrierCertificate
    coverage: CoverageSet | None
    evaluations: int
    regressed: bool


def certify(cert, grid_builder: Callable[[BarrierCertificate], StateGrid], prob: SafetyProblem) -> CoverageSet:
    return adaptive_cover(cert, grid_builder(cert), prob)


def expand_certificate(
    incumbent: BarrierCertificate,
    grid_builder: Callable[[BarrierCertificate], StateGrid],
    prob: SafetyProblem,
    search_bounds: tuple[float, float],
    tol: float = 1e-3,
) -> ExpansionResult:
    """Smallest ``mu`` in ``[mu_lo, incumbent.mu]`` whose region is covered.

    Bisection assumes certification is monotone in ``mu``.  If the incumbent
    no longer certifies (the model regressed) it is kept and flagged.
    """
    mu_lo = float(search_bounds[0])
    mu_hi = min(float(search_bounds[1]), incumbent.mu)
    evals = 1
    cov_hi = certify(incumbent.with_mu(mu_hi), grid_builder, prob)
    if not cov_hi.certified:
        log.warning("incumbent certificate mu=%.4f failed verification; keeping it", incumbent.mu)
        return ExpansionResult(incumbent, None, evals, True)
    cov_lo = certify(incumbent.with_mu(mu_lo), grid_builder, prob)
    evals += 1
    if cov_lo.certified:
        return ExpansionResult(incumbent.with_mu(mu_lo), cov_lo, evals, False)
    lo, hi = mu_lo, mu_hi
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        cov = certify(incumbent.with_mu(mid), grid_builder, prob)
        evals += 1
        if cov.certified:
            hi, cov_hi = mid, cov
        else:
            lo = mid
    return ExpansionResult(incumbent.with_mu(hi), cov_hi, evals, False)


def aggregate_std(residual, X) -> np.ndarray:
    """Sum of per-channel posterior standard deviations."""
    return residual.predict(X)[1].sum(axis=1)


def next_target(residual, cert, grid: StateGrid) -> np.ndarray:
    """Most uncertain in-set lattice point; ties go to the lowest index."""
    P = grid.inside_points
    if len(P) == 0:
        raise ValueError("no certified lattice points to explore")
    return P[int(np.argmax(aggregate_std(residual, P)))]


class FilterResult(NamedTuple):
    u: np.ndarray
    status: QpStatus
    constraint_a: np.ndarray
    constraint_b: float
    h: float


def safe_filter(u_hat, cert, x, prob: SafetyProblem, prediction=None) -> FilterResult:
    """Minimally modify ``u_hat`` so the robust barrier condition holds.

    When no control in the box satisfies it, the box point maximizing the
    barrier rate is returned with an infeasible status.  ``prediction`` may
    carry an already computed ``residual.predict(x)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    D = cert.grad(x)[0]
    a = D @ prob.model.g(x)[0]
    mean, std = prob.residual.predict(x) if prediction is None else prediction
    h = float(cert.h(x)[0])
    b = -(
        D @ (prob.model.f(x)[0] + mean[0])
        - prob.k_delta * (np.abs(D) @ std[0])
        + cert.gamma * h
    )
    qp = FilterQp(u_hat, a, b, prob.lo, prob.hi)
    u, status = solve(qp)
    if status is QpStatus.INFEASIBLE:
        log.info("safety filter infeasible at %s; applying max barrier-rate control", x[0].tolist())
        u = argmax_over_box(a, prob.lo, prob.hi)
    return FilterResult(u, status, a, float(b), h)
