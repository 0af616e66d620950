"""Per-vehicle belief store over preceding vehicles.

Delivered packets refresh one record per predecessor; between packets the
receiver extrapolates the sender forward using the transmitted controller
forecast first (it encodes intent) and the transmitted velocity model beyond
that, dead-reckoning position by integrating the reconstructed velocity.
The immediate predecessor is additionally observable through perfect local
ranging, which supplies the controller's current spacing and closing-speed
measurements and a constant-velocity fallback before any packet arrives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from . import dynamics, gp
from .comms import MBCMessage
from .dynamics import VehicleParams, VehicleState
from .mpc import NeighborForecast

_GRID_TOL = 1e-6

# A transmitted model is trusted for extrapolation only when its posterior
# mean reproduces the window's own latest sample within this bound.  The
# zero-mean prior makes the fitted noise absorb the full velocity magnitude
# on slowly varying windows, which shrinks extrapolations toward zero by
# several m/s; such a model fails this self-consistency check and the
# reconstruction falls back to holding the last forecast velocity.
GP_SELF_CONSISTENCY_TOL = 0.5


@dataclass
class NeighborRecord:
    """Latest accepted packet from one predecessor plus the reconstruction
    anchor (position and velocity at the packet's send time)."""

    vehicle_index: int
    last_message: MBCMessage
    last_update_time: float
    reconstructed_position: float
    reconstructed_velocity: float
    _posterior_weights: np.ndarray | None = None
    _gp_usable: bool | None = None

    def posterior_weights(self) -> np.ndarray:
        """Lazily cached solve of the transmitted model's kernel system;
        the posterior mean at any query is then a single kernel product."""
        if self._posterior_weights is None:
            msg = self.last_message
            training = gp.GPTrainingSet(msg.window_timestamps,
                                        msg.window_velocities)
            k = gp.kernel_matrix(training, msg.gp_hyper)
            self._posterior_weights = cho_solve(
                gp._chol(k), msg.window_velocities, check_finite=False)
        return self._posterior_weights

    def gp_usable(self) -> bool:
        """Self-consistency gate for extrapolating with the transmitted
        model (see GP_SELF_CONSISTENCY_TOL)."""
        if self._gp_usable is None:
            msg = self.last_message
            ks = gp.rbf_kernel(msg.window_timestamps[-1],
                               msg.window_timestamps,
                               msg.gp_hyper.length_scale)
            fitted = float(ks @ self.posterior_weights())
            self._gp_usable = (abs(fitted - msg.window_velocities[-1])
                               <= GP_SELF_CONSISTENCY_TOL)
        return self._gp_usable


class BeliefStore:
    """Single-writer record store owned by one vehicle."""

    def __init__(self):
        self.records: dict[int, NeighborRecord] = {}

    def ingest(self, message: MBCMessage, now: float) -> None:
        """Accept a delivered packet; stale or duplicate packets are ignored
        (idempotent)."""
        del now
        existing = self.records.get(message.sender_index)
        if existing is not None and (message.send_time
                                     <= existing.last_message.send_time):
            return
        self.records[message.sender_index] = NeighborRecord(
            vehicle_index=message.sender_index,
            last_message=message,
            last_update_time=message.send_time,
            reconstructed_position=message.position,
            reconstructed_velocity=float(message.window_velocities[-1]),
        )

    def get(self, vehicle_index: int) -> NeighborRecord | None:
        return self.records.get(vehicle_index)


def forecast_neighbor(record: NeighborRecord,
                      horizon_timestamps) -> NeighborForecast:
    """Reconstruct one predecessor over the given horizon timestamps.

    Velocities come from the transmitted controller forecast where the
    query falls inside it; beyond it they follow the transmitted velocity
    model's posterior mean when that model passes its self-consistency
    gate, else a zero-order hold of the last forecast velocity.  Positions
    integrate the velocity sequence (trapezoidal) from the packet's
    position; accelerations are forward differences of the velocity
    sequence.  Queries must lie on the packet's slot grid, at or after the
    send time.
    """
    ts = np.asarray(horizon_timestamps, dtype=float)
    msg = record.last_message
    t0 = msg.send_time
    dt = float(msg.forecast_timestamps[0]) - t0
    steps = (ts - t0) / dt
    idx = np.rint(steps).astype(int)
    if np.max(np.abs(steps - idx)) > _GRID_TOL / dt:
        raise ValueError("query timestamps are off the packet slot grid")
    if np.min(idx) < 0:
        raise ValueError("cannot reconstruct before the packet send time")
    # Velocity on the packet grid out one step past the last query (the
    # trailing point feeds the finite-difference acceleration).
    last = int(np.max(idx)) + 1
    v_grid = np.empty(last + 1)
    v_grid[0] = record.reconstructed_velocity
    n_fc = msg.forecast_velocities.size
    take = min(last, n_fc)
    v_grid[1:take + 1] = msg.forecast_velocities[:take]
    if last > n_fc:
        if record.gp_usable():
            # Posterior mean of the transmitted model beyond its forecast
            # range (matches a full predict; variance is not needed here).
            beyond = t0 + dt * np.arange(n_fc + 1, last + 1)
            ks = gp.rbf_kernel(beyond[:, None],
                               msg.window_timestamps[None, :],
                               msg.gp_hyper.length_scale)
            v_grid[n_fc + 1:] = ks @ record.posterior_weights()
        else:
            v_grid[n_fc + 1:] = msg.forecast_velocities[-1]
    # Dead-reckoned positions by trapezoidal integration from the packet.
    x_grid = np.empty(last + 1)
    x_grid[0] = record.reconstructed_position
    x_grid[1:] = record.reconstructed_position + np.cumsum(
        0.5 * dt * (v_grid[:-1] + v_grid[1:]))
    accel = (v_grid[idx + 1] - v_grid[idx]) / dt
    return NeighborForecast(vehicle_index=record.vehicle_index,
                            positions=x_grid[idx],
                            velocities=v_grid[idx],
                            accelerations=accel)


def sense_immediate_predecessor(params: VehicleParams, ego: VehicleState,
                                predecessor: VehicleState) -> tuple[float, float]:
    """Perfect local ranging: true gap and closing speed to the vehicle
    directly ahead."""
    d = dynamics.gap(predecessor, ego, params.vehicle_length)
    return d, predecessor.velocity - ego.velocity


def sensed_fallback_forecast(params: VehicleParams, ego: VehicleState,
                             sensed_gap: float, sensed_velocity_error: float,
                             predecessor_index: int,
                             horizon_timestamps) -> NeighborForecast:
    """Constant-velocity dead reckoning of the immediate predecessor from
    the ranging measurement, used before its first packet arrives."""
    ts = np.asarray(horizon_timestamps, dtype=float)
    v = ego.velocity + sensed_velocity_error
    x0 = ego.position + params.vehicle_length + sensed_gap
    return NeighborForecast(vehicle_index=predecessor_index,
                            positions=x0 + (ts - ts[0]) * v,
                            velocities=np.full(ts.size, v),
                            accelerations=np.zeros(ts.size))
