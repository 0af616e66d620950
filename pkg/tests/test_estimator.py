"""Belief-store and neighbor-reconstruction tests."""

import numpy as np
import pytest

from caccsim import dynamics, estimator, gp
from caccsim.comms import MBCMessage
from caccsim.dynamics import VehicleParams, VehicleState
from caccsim.estimator import BeliefStore, forecast_neighbor

PARAMS = VehicleParams()
DT = 0.1


def message(sender=1, send_time=2.0, position=100.0, velocities=None,
            forecast=None, hyper=None):
    wt = send_time + DT * np.arange(-4, 1)
    wv = np.full(5, 20.0) if velocities is None else np.asarray(velocities)
    ft = send_time + DT * np.arange(1, 11)
    fv = np.full(10, 20.0) if forecast is None else np.asarray(forecast)
    return MBCMessage(sender_index=sender, send_time=send_time,
                      gp_hyper=hyper or gp.GPHyperParams(0.3, 0.05),
                      window_timestamps=wt, window_velocities=wv,
                      position=position, acceleration=0.0,
                      forecast_timestamps=ft, forecast_velocities=fv)


class TestIngest:
    def test_empty_store_accepts(self):
        store = BeliefStore()
        store.ingest(message(send_time=2.0), now=2.1)
        rec = store.get(1)
        assert rec is not None
        assert rec.last_update_time == 2.0
        assert rec.reconstructed_position == 100.0

    def test_older_message_ignored(self):
        store = BeliefStore()
        newer = message(send_time=3.0, position=120.0)
        older = message(send_time=2.0, position=100.0)
        store.ingest(newer, now=3.1)
        store.ingest(older, now=3.2)
        assert store.get(1).last_message.send_time == 3.0

    def test_duplicate_is_idempotent(self):
        store = BeliefStore()
        msg = message(send_time=2.0)
        store.ingest(msg, now=2.1)
        first = store.get(1)
        store.ingest(msg, now=2.2)
        assert store.get(1) is first

    def test_anchor_matches_message_exactly(self):
        store = BeliefStore()
        store.ingest(message(send_time=2.0, position=77.25), now=2.1)
        rec = store.get(1)
        assert rec.reconstructed_position == 77.25
        assert rec.reconstructed_velocity == 20.0


class TestForecastNeighbor:
    def test_pass_through_inside_transmitted_forecast(self):
        store = BeliefStore()
        fv = 20.0 + 0.1 * np.arange(10)
        store.ingest(message(send_time=2.0, forecast=fv), now=2.1)
        ts = 2.1 + DT * np.arange(10)
        fc = forecast_neighbor(store.get(1), ts)
        assert np.array_equal(fc.velocities, fv)

    def test_constant_velocity_position_reconstruction_exact(self):
        v = 22.0
        store = BeliefStore()
        store.ingest(message(send_time=2.0, position=100.0,
                             velocities=np.full(5, v),
                             forecast=np.full(10, v)), now=2.1)
        ts = 2.1 + DT * np.arange(10)
        fc = forecast_neighbor(store.get(1), ts)
        expected = 100.0 + (ts - 2.0) * v
        assert np.max(np.abs(fc.positions - expected)) <= 1e-9
        # The final entry's forward difference reaches one grid point past
        # the transmitted forecast (model-extrapolation region).
        assert np.allclose(fc.accelerations[:-1], 0.0, atol=1e-12)

    def test_acceleration_is_forward_difference(self):
        store = BeliefStore()
        fv = 20.0 + 0.05 * np.arange(10) ** 2
        store.ingest(message(send_time=2.0, forecast=fv), now=2.1)
        ts = 2.1 + DT * np.arange(5)
        fc = forecast_neighbor(store.get(1), ts)
        for j in range(4):
            assert fc.accelerations[j] == pytest.approx(
                (fv[j + 1] - fv[j]) / DT)

    def test_zero_mean_decay_far_beyond_window(self):
        # Small-magnitude velocities keep the transmitted model
        # self-consistent, so the zero-mean pull is visible far out.
        v = 0.5
        store = BeliefStore()
        store.ingest(message(send_time=2.0, velocities=np.full(5, v),
                             forecast=np.full(10, v),
                             hyper=gp.GPHyperParams(0.2, 0.05)), now=2.1)
        far = np.array([2.0 + 50 * DT, 2.0 + 100 * DT])
        fc = forecast_neighbor(store.get(1), far)
        assert abs(fc.velocities[-1]) < 1e-6
        assert abs(fc.velocities[-1]) < abs(fc.velocities[0]) + 1e-12

    def test_gp_region_matches_predict_when_usable(self):
        rng = np.random.default_rng(3)
        wv = 0.8 + 0.05 * rng.standard_normal(5)
        train = gp.GPTrainingSet(2.0 + DT * np.arange(-4, 1), wv)
        hyper = gp.fit(train)
        model = gp.GPModel(hyper, train)
        store = BeliefStore()
        store.ingest(message(send_time=2.0, velocities=wv,
                             forecast=np.full(10, wv[-1]), hyper=hyper),
                     now=2.1)
        assert store.get(1).gp_usable()
        ts = np.array([2.0 + DT * 14])  # beyond the 10-step forecast
        fc = forecast_neighbor(store.get(1), ts)
        pred = gp.predict(model, ts)
        assert fc.velocities[0] == pytest.approx(pred.mean[0], abs=1e-12)

    def test_zero_order_hold_when_model_inconsistent(self):
        # Highway-magnitude constant window: the zero-mean fit shrinks its
        # own training data, so extrapolation holds the forecast tail.
        store = BeliefStore()
        fv = np.full(10, 25.0)
        store.ingest(message(send_time=2.0, velocities=np.full(5, 25.0),
                             forecast=fv,
                             hyper=gp.GPHyperParams(5.0, 1.0)), now=2.1)
        assert not store.get(1).gp_usable()
        ts = np.array([2.0 + DT * 15, 2.0 + DT * 20])
        fc = forecast_neighbor(store.get(1), ts)
        assert np.all(fc.velocities == 25.0)

    def test_off_grid_query_rejected(self):
        store = BeliefStore()
        store.ingest(message(send_time=2.0), now=2.1)
        with pytest.raises(ValueError):
            forecast_neighbor(store.get(1), [2.1, 2.17])

    def test_query_before_send_time_rejected(self):
        store = BeliefStore()
        store.ingest(message(send_time=2.0), now=2.1)
        with pytest.raises(ValueError):
            forecast_neighbor(store.get(1), [1.9])

    def test_position_error_bounded_by_velocity_error_integral(self):
        # Trapezoidal reconstruction versus the forward-Euler truth: the
        # bound needs the half-step correction dt*(v_end - v_start)/2.
        v0, accel = 20.0, 1.0
        send = 2.0
        truth_v = v0 + accel * DT * np.arange(11)
        store = BeliefStore()
        store.ingest(message(send_time=send, position=50.0,
                             velocities=v0 + accel * DT * np.arange(-4, 1),
                             forecast=truth_v[1:]), now=2.1)
        ts = send + DT * np.arange(11)
        fc = forecast_neighbor(store.get(1), ts)
        # Euler ground truth from the same anchor.
        truth_x = 50.0 + np.concatenate(
            [[0.0], np.cumsum(DT * truth_v[:-1])])
        vel_err = np.abs(fc.velocities - truth_v)
        for j in range(11):
            bound = (DT * np.sum(vel_err[:j + 1])
                     + 0.5 * DT * abs(fc.velocities[j] - fc.velocities[0])
                     + 1e-9)
            assert abs(fc.positions[j] - truth_x[j]) <= bound


class TestSensing:
    def test_gap_matches_dynamics(self):
        ego = VehicleState(0.0, 20.0, 0.0)
        pred = VehicleState(19.0, 21.0, 0.1)
        d, dv = estimator.sense_immediate_predecessor(PARAMS, ego, pred)
        assert d == dynamics.gap(pred, ego, PARAMS.vehicle_length)
        assert dv == pytest.approx(1.0)

    def test_equilibrium_pair(self):
        v = 20.0
        gap = dynamics.desired_spacing(PARAMS, v)
        ego = VehicleState(0.0, v, 0.0)
        pred = VehicleState(PARAMS.vehicle_length + gap, v, 0.0)
        d, dv = estimator.sense_immediate_predecessor(PARAMS, ego, pred)
        assert d == pytest.approx(gap)
        assert dv == 0.0

    def test_fallback_forecast_constant_velocity(self):
        ego = VehicleState(0.0, 20.0, 0.0)
        ts = 1.0 + DT * np.arange(10)
        fc = estimator.sensed_fallback_forecast(PARAMS, ego, 14.0, 1.5, 4, ts)
        assert fc.vehicle_index == 4
        assert np.all(fc.velocities == 21.5)
        assert fc.positions[0] == pytest.approx(0.0 + 5.0 + 14.0)
        assert fc.positions[-1] == pytest.approx(19.0 + 0.9 * 21.5)
        assert np.all(fc.accelerations == 0.0)
