"""Dynamic bicycle model: continuous ODE, discrete step, inverse controls.

The discrete step treats yaw angle and yaw rate as controls, so a state is
just ``[x, y, vx, vy]`` with positions in the world frame and velocities in
the body frame.  The array-level functions (``*_arrays``) accept numpy
arrays or tape tensors and broadcast over leading axes.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Sequence

import numpy as np

from .numkernel import tensor as T
from .numkernel.tensor import Tensor

V_MIN_FLOOR = 0.5
STEER_LIMIT = 0.6
DEFAULT_REG_LAMBDA = 1e-6
DEFAULT_TOL_ROT = 0.05


class DynamicsError(ValueError):
    def __init__(self, msg: str, step: int | None = None) -> None:
        super().__init__(msg if step is None else f"step {step}: {msg}")
        self.step = step


class NearZeroLongitudinalSpeed(DynamicsError):
    pass


class SingularDenominator(DynamicsError):
    pass


class InconsistentDisplacement(DynamicsError):
    pass


@dataclass(frozen=True)
class VehicleAttributes:
    mass_kg: float = 1500.0
    yaw_inertia_kg_m2: float = 2500.0
    dist_cg_front_m: float = 1.2
    dist_cg_rear_m: float = 1.6
    cornering_stiffness_front_N_per_rad: float = -1e5
    cornering_stiffness_rear_N_per_rad: float = -1e5

    def __post_init__(self) -> None:
        for f in ("mass_kg", "yaw_inertia_kg_m2", "dist_cg_front_m", "dist_cg_rear_m"):
            if not getattr(self, f) > 0:
                raise ValueError(f"{f} must be positive")
        kf, kr = self.cornering_stiffness_front_N_per_rad, self.cornering_stiffness_rear_N_per_rad
        if kf == 0 or kr == 0 or (kf > 0) != (kr > 0):
            raise ValueError("cornering stiffnesses must be nonzero and share a sign")

    @property
    def m(self) -> float:
        return self.mass_kg

    @property
    def kf(self) -> float:
        return self.cornering_stiffness_front_N_per_rad

    @property
    def kr(self) -> float:
        return self.cornering_stiffness_rear_N_per_rad

    @property
    def lf(self) -> float:
        return self.dist_cg_front_m

    @property
    def lr(self) -> float:
        return self.dist_cg_rear_m


@dataclass(frozen=True)
class KinematicState:
    x_m: float
    y_m: float
    vx_mps: float
    vy_mps: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "KinematicState":
        return cls(*(float(v) for v in a[:4]))


@dataclass(frozen=True)
class FullContinuousState:
    kinematic: KinematicState
    yaw_rad: float
    yaw_rate_radps: float

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.kinematic.as_array(), [self.yaw_rad, self.yaw_rate_radps]])

    @classmethod
    def from_array(cls, a) -> "FullContinuousState":
        return cls(KinematicState.from_array(a), float(a[4]), float(a[5]))


@dataclass(frozen=True)
class ControlInput:
    yaw_rad: float
    yaw_rate_radps: float
    steer_rad: float
    accel_mps2: float

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "ControlInput":
        return cls(*(float(v) for v in a[:4]))


@dataclass(frozen=True)
class StepSpec:
    dt_s: float

    def __post_init__(self) -> None:
        if not 0 < self.dt_s <= 1.0:
            raise ValueError("dt_s must lie in (0, 1]")


def _check_speed(vx: float, step: int | None = None) -> None:
    if not math.isfinite(vx) or abs(vx) < V_MIN_FLOOR:
        raise NearZeroLongitudinalSpeed(f"|vx|={abs(vx):.3g} below floor {V_MIN_FLOOR}", step)


# ------------------------------------------------------------------ continuous


def continuous_rates(y6: np.ndarray, steer: float, accel: float, attrs: VehicleAttributes, literal: bool = False) -> np.ndarray:
    """Time derivatives of ``[x, y, vx, vy, yaw, yaw_rate]``.

    ``literal=True`` evaluates the ydot and vxdot rows as printed in the
    source (``vx sin + vx cos`` and ``a + vx*omega``); the default uses the
    rigid-body forms ``vx sin + vy cos`` and ``a + vy*omega``.
    """
    _, _, vx, vy, phi, om = y6
    m, iz, lf, lr, kf, kr = attrs.m, attrs.yaw_inertia_kg_m2, attrs.lf, attrs.lr, attrs.kf, attrs.kr
    c, s = math.cos(phi), math.sin(phi)
    slip_f = (vy + lf * om) / vx - steer
    slip_r = (vy - lr * om) / vx
    xdot = vx * c - vy * s
    ydot = vx * s + (vx if literal else vy) * c
    vxdot = accel + (vx if literal else vy) * om - kf * slip_f * math.sin(steer) / m
    vydot = -vx * om + (kf * slip_f * math.cos(steer) + kr * slip_r) / m
    omdot = (lf * kf * slip_f * math.cos(steer) - lr * kr * slip_r) / iz
    return np.array([xdot, ydot, vxdot, vydot, om, omdot])


def continuous_derivative(
    state: FullContinuousState, steer_rad: float, accel_mps2: float, attrs: VehicleAttributes, literal: bool = False
) -> np.ndarray:
    _check_speed(state.kinematic.vx_mps)
    return continuous_rates(state.as_array(), steer_rad, accel_mps2, attrs, literal)


def rk4_step(
    state: FullContinuousState,
    steer_rad: float,
    accel_mps2: float,
    attrs: VehicleAttributes,
    spec: StepSpec | float,
    literal: bool = False,
) -> FullContinuousState:
    """Classical fourth-order Runge-Kutta step of the continuous model."""
    dt = spec.dt_s if isinstance(spec, StepSpec) else float(spec)
    y = state.as_array()
    if dt == 0:
        return state

    def f(yy):
        _check_speed(yy[2])
        return continuous_rates(yy, steer_rad, accel_mps2, attrs, literal)

    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return FullContinuousState.from_array(y + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))


# -------------------------------------------------------------------- discrete


def _abs_floor(vx, floor: float):
    """Sign-preserving clamp of |vx| to ``floor``; works on arrays and tensors."""
    raw = vx.data if isinstance(vx, Tensor) else np.asarray(vx)
    low = np.abs(raw) < floor
    if not low.any():
        return vx
    fill = np.where(raw < 0, -floor, floor)
    if isinstance(vx, Tensor):
        return T.where(low, fill, vx)
    return np.where(low, fill, raw)


def _sin(v):
    return T.sin(v) if isinstance(v, Tensor) else np.sin(v)


def _cos(v):
    return T.cos(v) if isinstance(v, Tensor) else np.cos(v)


def step_arrays(x, y, vx, vy, phi, omega, delta, accel, attrs: VehicleAttributes, dt: float, floor: float = V_MIN_FLOOR):
    """Discrete step on arrays or tensors; |vx| is clamped to ``floor`` in the lateral row."""
    m, lf, lr, kf, kr = attrs.m, attrs.lf, attrs.lr, attrs.kf, attrs.kr
    c, s = _cos(phi), _sin(phi)
    x1 = x + dt * (vx * c - vy * s)
    y1 = y + dt * (vy * c + vx * s)
    vx1 = vx + dt * accel
    u = _abs_floor(vx, floor)
    num = m * u * vy + dt * (lf * kf - lr * kr) * omega - dt * kf * delta * u - dt * m * u * u * omega
    den = m * u - dt * (kf + kr)
    return x1, y1, vx1, num / den


def discrete_step(state: KinematicState, ctrl: ControlInput, attrs: VehicleAttributes, spec: StepSpec) -> KinematicState:
    """Strict scalar step: raises instead of clamping."""
    vx = state.vx_mps
    _check_speed(vx)
    den = attrs.m * vx - spec.dt_s * (attrs.kf + attrs.kr)
    if abs(den) < 1e-9 * max(1.0, abs(attrs.m * vx)):
        raise SingularDenominator(f"denominator {den:.3g} vanishes at vx={vx}")
    out = step_arrays(
        state.x_m, state.y_m, vx, state.vy_mps,
        ctrl.yaw_rad, ctrl.yaw_rate_radps, ctrl.steer_rad, ctrl.accel_mps2,
        attrs, spec.dt_s, floor=0.0,
    )
    return KinematicState(*(float(v) for v in out))


def step_state(states, controls, attrs: VehicleAttributes, dt: float):
    """Vectorized step over ``(..., 4)`` states and ``(..., 4)`` controls (array or tensor)."""
    if isinstance(states, Tensor) or isinstance(controls, Tensor):
        cols = [states[..., i] for i in range(4)] + [controls[..., i] for i in range(4)]
        return T.stack(step_arrays(*cols, attrs=attrs, dt=dt), axis=-1)
    states, controls = np.asarray(states), np.asarray(controls)
    cols = [states[..., i] for i in range(4)] + [controls[..., i] for i in range(4)]
    return np.stack(step_arrays(*cols, attrs=attrs, dt=dt), axis=-1)


# --------------------------------------------------------------------- inverse


def inverse_arrays(s0: np.ndarray, s1: np.ndarray, attrs: VehicleAttributes, dt: float, reg_lambda: float = DEFAULT_REG_LAMBDA):
    """Batched, non-raising inverse map.

    Returns ``(controls[..., 4], rot_residual[...])`` where the residual is
    ``|R(phi) v dt - dpos|`` of the heading fit.
    """
    s0, s1 = np.asarray(s0, dtype=np.float64), np.asarray(s1, dtype=np.float64)
    vx, vy = s0[..., 2], s0[..., 3]
    dx, dy = s1[..., 0] - s0[..., 0], s1[..., 1] - s0[..., 1]
    # heading that best rotates (vx, vy) onto the displacement direction
    cross = vx * dy - vy * dx
    dot = vx * dx + vy * dy
    phi = np.arctan2(cross, dot)
    c, s = np.cos(phi), np.sin(phi)
    rx = dt * (vx * c - vy * s) - dx
    ry = dt * (vx * s + vy * c) - dy
    resid = np.hypot(rx, ry)
    accel = (s1[..., 2] - vx) / dt
    u = _abs_floor(vx, V_MIN_FLOOR)
    m, lf, lr, kf, kr = attrs.m, attrs.lf, attrs.lr, attrs.kf, attrs.kr
    # lateral row is linear in (omega, delta): c_om*omega + c_de*delta = rhs
    c_om = dt * (lf * kf - lr * kr) - dt * m * u * u
    c_de = -dt * kf * u
    den = m * u - dt * (kf + kr)
    rhs = s1[..., 3] * den - m * u * vy
    scale = rhs / (c_om * c_om + c_de * c_de + reg_lambda)
    controls = np.stack([phi, c_om * scale, c_de * scale, accel], axis=-1)
    return controls, resid


def inverse_controls(
    state_t: KinematicState,
    state_t1: KinematicState,
    attrs: VehicleAttributes,
    spec: StepSpec,
    reg_lambda: float = DEFAULT_REG_LAMBDA,
    tol_rot: float = DEFAULT_TOL_ROT,
) -> ControlInput:
    """Recover controls from two consecutive states.

    ``a`` and ``phi`` are determined exactly; ``(omega, delta)`` share one
    equation and the minimum-norm regularized solution is returned.
    """
    _check_speed(state_t.vx_mps)
    s0, s1 = state_t.as_array(), state_t1.as_array()
    controls, resid = inverse_arrays(s0, s1, attrs, spec.dt_s, reg_lambda)
    dpos = math.hypot(s1[0] - s0[0], s1[1] - s0[1])
    if resid > tol_rot * dpos:
        raise InconsistentDisplacement(f"heading-fit residual {float(resid):.3g} m exceeds {tol_rot} x |dpos|")
    return ControlInput.from_array(controls)


# --------------------------------------------------------------------- rollout


def rollout(
    initial: KinematicState,
    controls: Sequence[ControlInput],
    attrs: VehicleAttributes,
    spec: StepSpec,
) -> list[KinematicState]:
    if len(controls) == 0:
        raise ValueError("rollout needs at least one control")
    out = []
    state = initial
    for k, ctrl in enumerate(controls):
        try:
            state = discrete_step(state, ctrl, attrs, spec)
        except DynamicsError as exc:
            raise type(exc)(str(exc), step=k) from None
        out.append(state)
    return out


def rollout_arrays(initial: np.ndarray, controls: np.ndarray, attrs: VehicleAttributes, dt: float) -> np.ndarray:
    """Clamping rollout over ``(..., K, 4)`` controls; returns ``(..., K, 4)`` states."""
    state = np.asarray(initial, dtype=np.float64)
    out = []
    for k in range(controls.shape[-2]):
        state = step_state(state, controls[..., k, :], attrs, dt)
        out.append(state)
    return np.stack(out, axis=-2)


def rotate_positions(states: np.ndarray, theta: float) -> np.ndarray:
    """Rotate the world-frame position columns; body-frame velocities are unchanged."""
    out = np.array(states, dtype=np.float64)
    c, s = math.cos(theta), math.sin(theta)
    x, y = out[..., 0].copy(), out[..., 1].copy()
    out[..., 0] = c * x - s * y
    out[..., 1] = s * x + c * y
    return out


def world_velocity(states: np.ndarray, heading: np.ndarray) -> np.ndarray:
    vx, vy = states[..., 2], states[..., 3]
    c, s = np.cos(heading), np.sin(heading)
    return np.stack([vx * c - vy * s, vx * s + vy * c], axis=-1)
