"""Longitudinal vehicle model: gap geometry, constant-time-gap spacing policy,
first-order driveline dynamics with forward-Euler propagation, and hard
constraint checking.

All quantities are SI: meters, seconds, m/s, m/s^2.
"""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class VehicleParams:
    """Physical constants of one platoon member.

    Attributes:
        vehicle_length: bumper-to-bumper length [m]
        standstill_distance: desired gap at zero speed [m]
        time_gap: desired headway per unit speed [s]
        driveline_constant: inverse time constant of the driveline lag [1/s]
        accel_min / accel_max: achievable acceleration envelope [m/s^2]
        input_min / input_max: commanded-input envelope [m/s^2]
        speed_max: road speed limit [m/s]
    """

    vehicle_length: float = 5.0
    standstill_distance: float = 2.0
    time_gap: float = 0.6
    driveline_constant: float = 10.0
    accel_min: float = -4.0
    accel_max: float = 3.0
    input_min: float = -4.0
    input_max: float = 3.0
    speed_max: float = 30.0

    def __post_init__(self) -> None:
        if not self.accel_min < 0.0 < self.accel_max:
            raise ValueError("acceleration bounds must straddle zero")
        if not self.input_min < 0.0 < self.input_max:
            raise ValueError("input bounds must straddle zero")
        if self.driveline_constant <= 0.0:
            raise ValueError("driveline_constant must be positive")
        if self.time_gap <= 0.0:
            raise ValueError("time_gap must be positive")
        if self.standstill_distance <= 0.0:
            raise ValueError("standstill_distance must be positive")
        if self.speed_max <= 0.0:
            raise ValueError("speed_max must be positive")


@dataclass(frozen=True)
class VehicleState:
    """Absolute kinematic state of one vehicle.

    ``position`` is the longitudinal coordinate of the rear bumper.
    """

    position: float
    velocity: float
    acceleration: float
    timestamp: float = 0.0


@dataclass(frozen=True)
class ErrorState:
    """Derived error coordinates relative to the immediate predecessor:
    spacing error (actual gap minus desired gap), velocity error
    (predecessor speed minus own speed), and own acceleration.
    """

    spacing_error: float
    velocity_error: float
    acceleration: float


@dataclass(frozen=True)
class ConstraintViolation:
    """One violated hard constraint and by how much."""

    name: str
    margin: float


_TS_TOL = 1e-9


def gap(predecessor: VehicleState, follower: VehicleState,
        follower_length: float) -> float:
    """Bumper-to-bumper distance between a vehicle and the one ahead.

    The follower's own length is subtracted from the difference of rear-bumper
    positions; with a homogeneous platoon the choice of whose length is
    immaterial.  A negative return value signals overlap (collision).
    """
    if abs(predecessor.timestamp - follower.timestamp) > _TS_TOL:
        raise ValueError("gap requires states sampled at the same time")
    return predecessor.position - follower.position - follower_length


def desired_spacing(params: VehicleParams, velocity: float) -> float:
    """Constant-time-gap spacing policy: time_gap * velocity + standstill."""
    if velocity < 0.0:
        raise ValueError("desired_spacing requires a non-negative velocity")
    return params.time_gap * velocity + params.standstill_distance


def error_state(params: VehicleParams, predecessor: VehicleState,
                follower: VehicleState) -> ErrorState:
    """Error coordinates of ``follower`` relative to ``predecessor``."""
    d = gap(predecessor, follower, params.vehicle_length)
    return ErrorState(
        spacing_error=d - desired_spacing(params, follower.velocity),
        velocity_error=predecessor.velocity - follower.velocity,
        acceleration=follower.acceleration,
    )


def step(params: VehicleParams, state: VehicleState, control_input: float,
         predecessor_accel: float = 0.0, dt: float = 0.1) -> VehicleState:
    """One forward-Euler step of the absolute kinematics.

        a(k+1) = (1 - dt*f) * a(k) + dt*f * u(k)
        v(k+1) = v(k) + dt * a(k)
        x(k+1) = x(k) + dt * v(k)

    ``predecessor_accel`` is the disturbance input of the error-coordinate
    recursion; the absolute propagation does not depend on it (it is accepted
    so both formulations share one signature, leaders pass zero).  Velocity is
    clamped at zero from below: vehicles do not reverse.
    """
    del predecessor_accel
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    af = dt * params.driveline_constant
    return VehicleState(
        position=state.position + dt * state.velocity,
        velocity=max(0.0, state.velocity + dt * state.acceleration),
        acceleration=(1.0 - af) * state.acceleration + af * control_input,
        timestamp=state.timestamp + dt,
    )


def check_hard_constraints(params: VehicleParams, state: VehicleState,
                           control_input: float,
                           gap_to_predecessor: float) -> list[ConstraintViolation]:
    """Report every violated hard constraint with its violation margin.

    Acceleration, input and speed bounds are non-strict; the gap must be
    strictly positive.  An empty list means all constraints hold.
    """
    violations = []
    if state.acceleration > params.accel_max:
        violations.append(ConstraintViolation(
            "accel_max", state.acceleration - params.accel_max))
    if state.acceleration < params.accel_min:
        violations.append(ConstraintViolation(
            "accel_min", params.accel_min - state.acceleration))
    if control_input > params.input_max:
        violations.append(ConstraintViolation(
            "input_max", control_input - params.input_max))
    if control_input < params.input_min:
        violations.append(ConstraintViolation(
            "input_min", params.input_min - control_input))
    if state.velocity > params.speed_max:
        violations.append(ConstraintViolation(
            "speed_max", state.velocity - params.speed_max))
    if gap_to_predecessor <= 0.0:
        violations.append(ConstraintViolation(
            "gap_positive", -gap_to_predecessor))
    return violations
