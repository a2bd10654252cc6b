"""Continuous and discrete bicycle model, inverse map and rollout."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demotraj.dynamics import (
    ControlInput,
    FullContinuousState,
    InconsistentDisplacement,
    KinematicState,
    NearZeroLongitudinalSpeed,
    SingularDenominator,
    StepSpec,
    VehicleAttributes,
    continuous_derivative,
    discrete_step,
    inverse_arrays,
    inverse_controls,
    rk4_step,
    rollout,
    rollout_arrays,
    step_state,
)

# Frozen from a standalone scalar evaluation of the rate equations
# (state (0,0,10,0.5), yaw 0, yaw rate 0.1, steer 0.05, accel 0, default sedan attributes).
RATES_CORRECTED = [10.0, 0.5, 0.08998333541654266, -4.0656668749826395, 0.1, 1.6007198500124993]
RATES_LITERAL = [10.0, 10.0, 1.0399833354165426, -4.0656668749826395, 0.1, 1.6007198500124993]
# Forward Euler with h=1e-5 over 0.01 s from the same state.
EULER_REF = [0.1000019269199268, 0.004856328424338682, 10.00088019021128, 0.4614111192931625,
             0.0010748516301231157, 0.11449552751313465]
# Scalar replay of 20 discrete steps under a sinusoidal steering profile.
ROLLOUT_STEP9 = (15.077138270486554, 0.4993529510752698, 15.199999999999996, 0.1211553194238154)
ROLLOUT_FINAL = (30.353994245258065, 0.98575684896001, 15.399999999999991, -0.12154444694050745)


def _full(x, y, vx, vy, phi, om):
    return FullContinuousState(KinematicState(x, y, vx, vy), phi, om)


def test_derivative_straight_line(attrs):
    r = continuous_derivative(_full(0, 0, 10, 0, 0, 0), 0.0, 0.0, attrs)
    np.testing.assert_allclose(r, [10, 0, 0, 0, 0, 0], atol=1e-15)


def test_derivative_rotated_heading_with_accel(attrs):
    r = continuous_derivative(_full(0, 0, 10, 0, math.pi / 2, 0), 0.0, 1.0, attrs)
    np.testing.assert_allclose(r, [0, 10, 1, 0, 0, 0], atol=1e-12)


@pytest.mark.parametrize("literal, expected", [(False, RATES_CORRECTED), (True, RATES_LITERAL)])
def test_derivative_matches_scalar_oracle(attrs, literal, expected):
    r = continuous_derivative(_full(0, 0, 10, 0.5, 0, 0.1), 0.05, 0.0, attrs, literal=literal)
    np.testing.assert_allclose(r, expected, rtol=0, atol=1e-12)


def test_derivative_rejects_slow_vehicle(attrs):
    with pytest.raises(NearZeroLongitudinalSpeed):
        continuous_derivative(_full(0, 0, 0.2, 0, 0, 0), 0.0, 0.0, attrs)


def test_rk4_pure_translation(attrs):
    out = rk4_step(_full(0, 0, 10, 0, 0, 0), 0.0, 0.0, attrs, StepSpec(0.1))
    np.testing.assert_allclose(out.as_array(), [1.0, 0, 10, 0, 0, 0], atol=1e-12)


def test_rk4_zero_dt_is_identity(attrs):
    s = _full(1, 2, 10, 0.3, 0.2, 0.05)
    assert rk4_step(s, 0.1, 1.0, attrs, 0.0) == s


def test_rk4_agrees_with_fine_euler(attrs):
    out = rk4_step(_full(0, 0, 10, 0.5, 0, 0.1), 0.05, 0.0, attrs, StepSpec(0.01))
    # the Euler reference itself carries O(h) error of a few 1e-6
    np.testing.assert_allclose(out.as_array(), EULER_REF, atol=1e-5)


def test_rk4_propagates_speed_error(attrs):
    with pytest.raises(NearZeroLongitudinalSpeed):
        rk4_step(_full(0, 0, 0.6, 0, 0, 0), 0.0, -5.0, attrs, StepSpec(0.1))


def test_discrete_zero_control(attrs):
    out = discrete_step(KinematicState(0, 0, 10, 0), ControlInput(0, 0, 0, 0), attrs, StepSpec(0.1))
    np.testing.assert_allclose(out.as_array(), [1.0, 0, 10, 0], atol=1e-15)


def test_discrete_rotation_and_accel(attrs):
    out = discrete_step(KinematicState(0, 0, 10, 0), ControlInput(math.pi / 2, 0, 0, 2.0), attrs, StepSpec(0.1))
    np.testing.assert_allclose(out.as_array(), [0, 1.0, 10.2, 0], atol=1e-12)


def test_discrete_golden_lateral_velocity(attrs):
    out = discrete_step(KinematicState(0, 0, 10, 0), ControlInput(0, 0.1, 0.05, 0), attrs, StepSpec(0.1))
    assert out.x_m == pytest.approx(1.0, abs=1e-15)
    assert abs(out.vy_mps - 3900.0 / 35000.0) < 1e-12


def test_discrete_errors():
    attrs = VehicleAttributes()
    with pytest.raises(NearZeroLongitudinalSpeed):
        discrete_step(KinematicState(0, 0, 0.1, 0), ControlInput(0, 0, 0, 0), attrs, StepSpec(0.1))
    # positive stiffness puts the pole at m vx = dt (kf + kr)
    pos = VehicleAttributes(cornering_stiffness_front_N_per_rad=7.5e4, cornering_stiffness_rear_N_per_rad=7.5e4)
    with pytest.raises(SingularDenominator):
        discrete_step(KinematicState(0, 0, 10.0, 0), ControlInput(0, 0, 0, 0), pos, StepSpec(0.1))


def test_inverse_straight_acceleration(attrs):
    c = inverse_controls(KinematicState(0, 0, 10, 0), KinematicState(1.0, 0, 10.2, 0), attrs, StepSpec(0.1))
    np.testing.assert_allclose(c.as_array(), [0, 0, 0, 2.0], atol=1e-12)


def test_inverse_quarter_turn(attrs):
    c = inverse_controls(KinematicState(0, 0, 10, 0), KinematicState(0, 1.0, 10, 0), attrs, StepSpec(0.1))
    assert c.yaw_rad == pytest.approx(math.pi / 2, abs=1e-12)
    assert c.accel_mps2 == pytest.approx(0.0, abs=1e-12)


def test_inverse_residual_on_underdetermined_pair(attrs):
    spec = StepSpec(0.1)
    s0 = KinematicState(0, 0, 10, 0)
    s1 = discrete_step(s0, ControlInput(0, 0.1, 0.05, 0), attrs, spec)
    c = inverse_controls(s0, s1, attrs, spec)
    assert (c.yaw_rate_radps, c.steer_rad) != pytest.approx((0.1, 0.05))
    replay = discrete_step(s0, c, attrs, spec)
    assert abs(replay.vy_mps - s1.vy_mps) < 1e-9


def test_inverse_rejects_inconsistent_displacement(attrs):
    # moving backwards while vx is positive cannot be explained by a rotation of (vx, vy)
    with pytest.raises(InconsistentDisplacement):
        inverse_controls(KinematicState(0, 0, 10, 0), KinematicState(-1.0, 0.5, 10, 0), attrs, StepSpec(0.1))


@settings(max_examples=60, deadline=None)
@given(
    vx=st.floats(2.0, 40.0),
    vy=st.floats(-2.0, 2.0),
    phi=st.floats(-math.pi + 1e-3, math.pi - 1e-3),
    om=st.floats(-0.5, 0.5),
    delta=st.floats(-0.3, 0.3),
    acc=st.floats(-5.0, 5.0),
    neg=st.booleans(),
)
def test_roundtrip_property(vx, vy, phi, om, delta, acc, neg):
    k = -1e5 if neg else 1e5
    attrs = VehicleAttributes(cornering_stiffness_front_N_per_rad=k, cornering_stiffness_rear_N_per_rad=k)
    s0 = np.array([3.0, -1.0, vx, vy])
    c = np.array([phi, om, delta, acc])
    s1 = step_state(s0, c, attrs, 0.1)
    rec, _ = inverse_arrays(s0, s1, attrs, 0.1)
    assert abs(rec[0] - phi) < 1e-9
    assert abs(rec[3] - acc) < 1e-9
    assert abs(step_state(s0, rec, attrs, 0.1)[3] - s1[3]) < 1e-9


def test_rollout_zero_controls(attrs):
    out = rollout(KinematicState(0, 0, 10, 0), [ControlInput(0, 0, 0, 0)] * 5, attrs, StepSpec(0.1))
    assert len(out) == 5
    # five steps of 0.1 s at 10 m/s
    assert out[-1].x_m == pytest.approx(5.0, abs=1e-12)


def test_rollout_single_control_equals_step(attrs):
    s0, c, spec = KinematicState(1, 2, 12, 0.1), ControlInput(0.1, 0.02, 0.01, 0.5), StepSpec(0.1)
    assert rollout(s0, [c], attrs, spec) == [discrete_step(s0, c, attrs, spec)]


def test_rollout_matches_scalar_replay(attrs):
    controls, phi = [], 0.0
    for k in range(20):
        t = k * 0.1
        w = 0.1 * math.sin(math.pi * t)
        controls.append(ControlInput(phi, w, 0.05 * math.sin(math.pi * t), 0.2))
        phi += 0.1 * w
    out = rollout(KinematicState(0, 0, 15, 0), controls, attrs, StepSpec(0.1))
    np.testing.assert_allclose(out[9].as_array(), ROLLOUT_STEP9, atol=1e-12)
    np.testing.assert_allclose(out[-1].as_array(), ROLLOUT_FINAL, atol=1e-12)
    arr = rollout_arrays(np.array([0, 0, 15.0, 0]), np.array([c.as_array() for c in controls]), attrs, 0.1)
    np.testing.assert_allclose(arr[-1], ROLLOUT_FINAL, atol=1e-12)


def test_rollout_reports_failing_step(attrs):
    controls = [ControlInput(0, 0, 0, -20.0)] * 4
    with pytest.raises(NearZeroLongitudinalSpeed) as info:
        rollout(KinematicState(0, 0, 4.0, 0), controls, attrs, StepSpec(0.1))
    assert info.value.step == 2


def test_zero_control_straight_line_is_exact(attrs):
    arr = rollout_arrays(np.array([0.0, 2.0, 13.0, 0.0]), np.zeros((30, 4)), attrs, 0.2)
    assert np.all(arr[:, 1] == 2.0)
    assert np.all(arr[:, 2] == 13.0)
    np.testing.assert_allclose(arr[:, 0], 2.6 * np.arange(1, 31), rtol=1e-14)
