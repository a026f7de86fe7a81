import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from safelearn.flatness import (
    FlatRef,
    Gains,
    Lissajous,
    Quintic,
    desired_euler_rates,
    feedback,
    feedforward,
    flat_to_attitude,
    pole_placement_ref,
    poly_from_poles,
)
from safelearn.quad import (
    G0,
    PlantConfig,
    SingularAttitudeError,
    clamp_control,
    euler_rate_matrix,
    integrate_step,
    measured_residual,
    nominal_derivative,
    true_derivative,
)
from safelearn.tracking import FlatnessController

MATCHED = PlantConfig(mass_ratio=1.0, wind_accel=(0.0, 0.0, 0.0))
M = MATCHED.nominal_mass


def hover(z=-1.0):
    return FlatRef(r=(0, 0, z), v=(0, 0, 0), a=(0, 0, 0), j=(0, 0, 0))


def state_on(ref, theta, phi, psi=0.0):
    q = np.zeros(9)
    q[0:3], q[3:6], q[6], q[7], q[8] = ref.r, ref.v, theta, phi, psi
    return q


def test_hover_attitude_is_level():
    assert flat_to_attitude(hover()) == (0.0, 0.0)


def test_forward_acceleration_pitch():
    ref = FlatRef(r=(0, 0, 0), v=(0, 0, 0), a=(G0, 0, 0), j=(0, 0, 0))
    theta, phi = flat_to_attitude(ref)
    assert theta == pytest.approx(-math.pi / 4, abs=1e-12)
    assert phi == pytest.approx(0.0, abs=1e-12)


def test_free_fall_reference_is_singular():
    ref = FlatRef(r=(0, 0, 0), v=(0, 0, 0), a=(0, 0, G0), j=(0, 0, 0))
    with pytest.raises(SingularAttitudeError):
        flat_to_attitude(ref)


def test_non_finite_reference_rejected():
    with pytest.raises(ValueError):
        FlatRef(r=(0, np.nan, 0), v=(0, 0, 0), a=(0, 0, 0), j=(0, 0, 0))


def test_correction_tilts_into_wind():
    wind = np.array([0.1 * G0, 0.0, 0.0])
    theta0, _ = flat_to_attitude(hover())
    theta1, _ = flat_to_attitude(hover(), gp_corr=wind)
    # x wind needs thrust pointing at -x, i.e. positive pitch in this frame
    assert theta1 > theta0
    q = state_on(hover(), theta1, 0.0)
    u = feedforward(hover(), M, gp_corr6=np.r_[wind, 0, 0, 0])
    acc = nominal_derivative(q, u, MATCHED)[3:6] + wind
    assert np.allclose(acc, 0.0, atol=1e-12)


def test_hover_feedforward():
    u = feedforward(hover(), M)
    assert u[0] == pytest.approx(-M * G0, abs=1e-12)
    assert np.allclose(u[1:], 0.0, atol=1e-12)


def test_climb_feedforward_matches_hover():
    climb = FlatRef(r=(0, 0, -1), v=(0, 0, 1), a=(0, 0, 0), j=(0, 0, 0))
    assert np.allclose(feedforward(climb, M), feedforward(hover(), M), atol=1e-12)


@pytest.mark.parametrize("t", np.linspace(0.0, 12.0, 49))
def test_flatness_round_trip(t):
    ref = Lissajous().ref(t)
    theta, phi = flat_to_attitude(ref)
    q = state_on(ref, theta, phi)
    acc = nominal_derivative(q, feedforward(ref, M), MATCHED)[3:6]
    assert np.max(np.abs(acc - ref.a)) < 1e-6


def test_feedforward_rates_reproduce_attitude_rates():
    path = Lissajous()
    h = 1e-5
    for t in np.linspace(0.5, 11.5, 12):
        ref = path.ref(t)
        theta, phi = flat_to_attitude(ref)
        rates = euler_rate_matrix(phi, theta) @ feedforward(ref, M)[1:]
        th_p, ph_p = flat_to_attitude(path.ref(t + h))
        th_m, ph_m = flat_to_attitude(path.ref(t - h))
        assert rates[0] == pytest.approx((ph_p - ph_m) / (2 * h), abs=1e-5)
        assert rates[1] == pytest.approx((th_p - th_m) / (2 * h), abs=1e-5)
        assert desired_euler_rates(ref)[0] == pytest.approx(rates[0], abs=1e-5)


def test_feedback_zero_on_reference():
    ref = Lissajous().ref(2.0)
    theta, phi = flat_to_attitude(ref)
    u = feedback(state_on(ref, theta, phi), ref, (phi, theta, 0.0), Gains(), (0.1, -0.2, 0.0), (0.1, -0.2, 0.0))
    assert np.array_equal(u, np.zeros(4))


@given(st.floats(-2, 2))
def test_feedback_altitude_error(dz):
    g = Gains()
    ref = hover()
    q = state_on(ref, 0.0, 0.0)
    q[2] -= dz
    u = feedback(q, ref, (0.0, 0.0, 0.0), g)
    assert u[0] == pytest.approx(g.kp * dz, abs=1e-12)
    assert np.allclose(u[1:], 0.0)


@given(st.floats(-2, 2))
def test_feedback_lateral_y_error(dy):
    g = Gains()
    ref = hover()
    q = state_on(ref, 0.0, 0.0)
    q[1] -= dy
    u = feedback(q, ref, (0.0, 0.0, 0.0), g)
    assert u[1] == pytest.approx(g.kp_bar * dy, abs=1e-12)
    assert u[0] == 0.0 and u[3] == 0.0
    # the controller's implicit rate solve leaves a level attitude unchanged
    c = FlatnessController(g, M, G0)(q, ref)
    assert c[1] == pytest.approx(g.kp_bar * dy / (1 + g.kd), abs=1e-12)


def test_pole_gains():
    k = poly_from_poles([-2.0, -2.5, -3.0])
    assert np.allclose(k, [15.0, 18.5, 7.5])
    assert np.allclose(Gains().pole_k, [15.0, 18.5, 7.5])


@pytest.mark.parametrize("poles", [[1.0, -2.0, -3.0], [0.0, -1.0, -1.0]])
def test_unstable_poles_rejected(poles):
    with pytest.raises(ValueError):
        Gains.from_poles(poles)


def test_negative_gain_rejected():
    with pytest.raises(ValueError):
        Gains(kp=-1.0)


def test_pole_placement_zero_error():
    eta = (np.ones(3), np.ones(3), np.ones(3), np.array([0.3, -0.2, 0.1]))
    out = pole_placement_ref(eta, eta[:3], Gains().pole_k)
    assert np.array_equal(out, eta[3])


def test_pole_placement_step_matches_ode_oracle():
    poles = np.array([-2.0, -2.5, -3.0])
    k = Gains().pole_k
    # closed form e(t) = sum c_i exp(p_i t) with e(0)=1, e'(0)=e''(0)=0
    V = np.vander(poles, 3, increasing=True).T
    c = np.linalg.solve(V, [1.0, 0.0, 0.0])
    dt, T = 1e-3, 6.0
    zero = np.zeros(3)
    x = np.array([1.0, 0.0, 0.0])  # position, velocity, acceleration of one axis

    def f(s):
        jerk = pole_placement_ref((zero, zero, zero, zero), (s[0:1], s[1:2], s[2:3]), k)[0]
        return np.array([s[1], s[2], jerk])

    ts = np.arange(0, T + dt / 2, dt)
    sim = [x[0]]
    for _ in ts[1:]:
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        sim.append(x[0])
    sim = np.array(sim)
    oracle = (c[None, :] * np.exp(np.outer(ts, poles))).sum(1)
    assert np.max(np.abs(sim - oracle)) < 1e-8
    assert abs(sim.min() - oracle.min()) <= 0.01 * max(abs(oracle.min()), 1e-3)
    # slowest mode dominates late: e(t) exp(2t) approaches its coefficient
    assert c[0] == pytest.approx(15.0)
    assert abs(sim[-1] * math.exp(2 * T) / c[0] - 1) < 0.1


def test_quintic_boundary_conditions():
    q = Quintic.fit(0.2, -0.5, 1.0, -1.0, 0.3, 0.0, 2.0)
    p, v, a, _ = q(0.0)
    assert (p, v, a) == pytest.approx((0.2, -0.5, 1.0), abs=1e-12)
    p, v, a, _ = q(2.0)
    assert (p, v, a) == pytest.approx((-1.0, 0.3, 0.0), abs=1e-12)
    p, v, a, j = q(3.0)
    assert (p, v, a, j) == pytest.approx((-0.7, 0.3, 0.0, 0.0), abs=1e-12)
    with pytest.raises(ValueError):
        Quintic.fit(0, 0, 0, 1, 0, 0, 0.0)


def closed_loop(plant, oracle, steps=3000, dt=0.01, gains=Gains()):
    """Pole-placement tracking loop with optional exact residual correction.

    Returns position errors and applied controls.
    """
    ctrl = FlatnessController(gains, plant.nominal_mass, G0)
    path = Lissajous()
    p0, v0, a_cmd, _ = path.derivatives(0.0)
    q = np.zeros(9)
    q[0:3], q[3:6] = p0, v0
    fn = lambda s, c: true_derivative(s, c, plant)  # noqa: E731
    u = np.array([-plant.nominal_mass * G0, 0.0, 0.0, 0.0])
    errs, us = [], []
    for k in range(steps):
        eta = path.derivatives(k * dt)
        jerk = pole_placement_ref(eta, (q[0:3], q[3:6], a_cmd), gains.pole_k)
        ref = FlatRef(eta[0], eta[1], a_cmd, jerk)
        corr = measured_residual(q, u, fn(q, u), plant) if oracle else None
        u = clamp_control(ctrl(q, ref, corr), plant)
        errs.append(np.linalg.norm(q[0:3] - eta[0]))
        us.append(u)
        q = integrate_step(q, u, dt, fn)
        a_cmd = a_cmd + jerk * dt
    return np.array(errs), np.array(us)


def test_oracle_correction_removes_wind_error():
    plant = PlantConfig(mass_ratio=1.0)
    e_nom, _ = closed_loop(plant, False)
    e_or, _ = closed_loop(plant, True)
    half = len(e_nom) // 2
    assert e_or[half:].mean() < 0.01 * e_nom[half:].mean()


@pytest.mark.xfail(
    strict=True,
    reason="thrust-proportional mismatch fed back as an additive acceleration slows the tilt response; ratio ~0.13",
)
def test_oracle_correction_removes_full_mismatch_error():
    plant = PlantConfig()
    e_nom, _ = closed_loop(plant, False)
    e_or, _ = closed_loop(plant, True)
    half = len(e_nom) // 2
    assert e_or[half:].mean() < 0.01 * e_nom[half:].mean()


def test_matched_plant_tracks_and_controls_are_continuous():
    errs, us = closed_loop(MATCHED, False, steps=1200)
    assert errs.max() < 1e-3
    # bounded step-to-step control change along a smooth reference
    assert np.max(np.abs(np.diff(us, axis=0))) < 0.05


def test_mismatch_increases_error():
    e_match, _ = closed_loop(MATCHED, False, steps=1200)
    e_mis, _ = closed_loop(PlantConfig(), False, steps=1200)
    assert e_mis[600:].mean() > 10 * e_match[600:].mean()
