"""Vehicle model tests: gap geometry, spacing policy, Euler propagation and
constraint checks."""

import math

import numpy as np
import pytest

from caccsim import dynamics
from caccsim.dynamics import VehicleParams, VehicleState


PARAMS = VehicleParams()


def state(x, v, a, t=0.0):
    return VehicleState(position=x, velocity=v, acceleration=a, timestamp=t)


class TestGap:
    def test_simple(self):
        assert dynamics.gap(state(100, 20, 0), state(80, 20, 0), 5.0) == 15.0

    def test_bumper_contact(self):
        assert dynamics.gap(state(85, 20, 0), state(80, 20, 0), 5.0) == 0.0

    def test_overlap_is_negative(self):
        assert dynamics.gap(state(83, 20, 0), state(80, 20, 0), 5.0) == -2.0

    def test_timestamp_mismatch_rejected(self):
        with pytest.raises(ValueError):
            dynamics.gap(state(100, 20, 0, t=0.0), state(80, 20, 0, t=0.1), 5.0)


class TestDesiredSpacing:
    def test_standstill(self):
        assert dynamics.desired_spacing(PARAMS, 0.0) == 2.0

    def test_at_twenty(self):
        assert dynamics.desired_spacing(PARAMS, 20.0) == pytest.approx(14.0)

    def test_at_ten(self):
        assert dynamics.desired_spacing(PARAMS, 10.0) == pytest.approx(8.0)

    def test_negative_velocity_rejected(self):
        with pytest.raises(ValueError):
            dynamics.desired_spacing(PARAMS, -0.1)


class TestErrorState:
    def test_equilibrium(self):
        pred = state(99.0, 20.0, 0.0)
        fol = state(80.0, 20.0, 0.0)  # gap 14 = desired at 20 m/s
        err = dynamics.error_state(PARAMS, pred, fol)
        assert err.spacing_error == pytest.approx(0.0)
        assert err.velocity_error == pytest.approx(0.0)

    def test_positive_errors(self):
        pred = state(101.0, 22.0, 0.0)
        fol = state(80.0, 20.0, 0.5)
        err = dynamics.error_state(PARAMS, pred, fol)
        assert err.spacing_error == pytest.approx(2.0)
        assert err.velocity_error == pytest.approx(2.0)
        assert err.acceleration == 0.5

    def test_negative_errors(self):
        pred = state(95.0, 18.0, 0.0)
        fol = state(80.0, 20.0, 0.0)
        err = dynamics.error_state(PARAMS, pred, fol)
        assert err.spacing_error == pytest.approx(-4.0)
        assert err.velocity_error == pytest.approx(-2.0)

    def test_gap_term_scales_with_geometry(self):
        pred = state(101.0, 22.0, 0.0)
        fol = state(80.0, 20.0, 0.0)
        lam = 3.0
        scaled_params = VehicleParams(vehicle_length=lam * PARAMS.vehicle_length)
        base_gap = dynamics.gap(pred, fol, PARAMS.vehicle_length)
        scaled_gap = dynamics.gap(state(lam * 101.0, 22.0, 0.0),
                                  state(lam * 80.0, 20.0, 0.0),
                                  scaled_params.vehicle_length)
        assert scaled_gap == pytest.approx(lam * base_gap)


class TestStep:
    def test_accel_equals_previous_input_when_fdt_is_one(self):
        # Table-style values: driveline constant 10/s at dt 0.1 s.
        s = state(0.0, 20.0, 1.7)
        for u in (0.0, -2.3, 3.0, 0.731):
            nxt = dynamics.step(PARAMS, s, u, 0.0, dt=0.1)
            assert nxt.acceleration == u  # exact, not approximate

    def test_coasting(self):
        nxt = dynamics.step(PARAMS, state(0.0, 20.0, 0.0), 0.0, 0.0, dt=0.1)
        assert nxt.position == pytest.approx(2.0)
        assert nxt.velocity == pytest.approx(20.0)

    def test_velocity_euler_step(self):
        nxt = dynamics.step(PARAMS, state(0.0, 0.0, 1.0), 1.0, 0.0, dt=0.1)
        assert nxt.velocity == pytest.approx(0.1)

    def test_no_reverse(self):
        nxt = dynamics.step(PARAMS, state(0.0, 0.1, -4.0), 0.0, 0.0, dt=0.1)
        assert nxt.velocity == 0.0

    def test_timestamp_advances(self):
        nxt = dynamics.step(PARAMS, state(0.0, 5.0, 0.0, t=1.2), 0.0, 0.0, dt=0.1)
        assert nxt.timestamp == pytest.approx(1.3)

    def test_nonpositive_dt_rejected(self):
        with pytest.raises(ValueError):
            dynamics.step(PARAMS, state(0, 0, 0), 0.0, 0.0, dt=0.0)

    def test_euler_first_order_consistency(self):
        # Fixed-horizon error against the closed form a(t) = u + (a0 - u)
        # exp(-f t) halves when dt halves (first-order convergence).
        f = PARAMS.driveline_constant
        a0, u, horizon = 2.0, -1.0, 0.1
        errs = []
        for n_steps in (64, 128):
            dt = horizon / n_steps
            s = state(0, 10, a0)
            for _ in range(n_steps):
                s = dynamics.step(PARAMS, s, u, 0.0, dt=dt)
            exact = u + (a0 - u) * math.exp(-f * horizon)
            errs.append(abs(s.acceleration - exact))
        ratio = errs[0] / errs[1]
        assert 1.8 < ratio < 2.2

    def test_multi_step_converges_to_input(self):
        s = state(0.0, 10.0, 0.0)
        for _ in range(50):
            s = dynamics.step(PARAMS, s, 1.5, 0.0, dt=0.01)
        assert s.acceleration == pytest.approx(1.5, abs=1e-2)


class TestHardConstraints:
    def test_boundary_values_pass(self):
        s = state(0.0, PARAMS.speed_max, 3.0)
        assert dynamics.check_hard_constraints(PARAMS, s, 3.0, 0.01) == []

    def test_accel_violation_margin(self):
        s = state(0.0, 10.0, 3.5)
        violations = dynamics.check_hard_constraints(PARAMS, s, 0.0, 10.0)
        assert len(violations) == 1
        assert violations[0].name == "accel_max"
        assert violations[0].margin == pytest.approx(0.5)

    def test_zero_gap_is_violation(self):
        s = state(0.0, 10.0, 0.0)
        violations = dynamics.check_hard_constraints(PARAMS, s, 0.0, 0.0)
        assert [v.name for v in violations] == ["gap_positive"]

    def test_multiple_violations(self):
        s = state(0.0, 31.0, -5.0)
        names = {v.name for v in
                 dynamics.check_hard_constraints(PARAMS, s, 4.0, -1.0)}
        assert names == {"accel_min", "input_max", "speed_max", "gap_positive"}


class TestParamsValidation:
    def test_defaults_valid(self):
        VehicleParams()

    @pytest.mark.parametrize("kwargs", [
        {"accel_min": 1.0},
        {"accel_max": -1.0},
        {"input_min": 0.5},
        {"driveline_constant": 0.0},
        {"time_gap": -0.1},
        {"standstill_distance": 0.0},
        {"speed_max": -5.0},
    ])
    def test_bad_params_rejected(self, kwargs):
        with pytest.raises(ValueError):
            VehicleParams(**kwargs)
