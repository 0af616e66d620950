"""Event-triggered transmission scheduling, model-based packet construction,
and the lossy broadcast channel.

A vehicle fires either on a fixed schedule (time-triggered baseline, every
communication slot) or when its controller's optimal cost crosses a
threshold (control-aware), always respecting the minimum inter-event time
and forcing a transmission once the maximum inter-event time elapses.
Packets carry the fitted velocity-model hyperparameters, the raw observation
window, the current position and acceleration, and the controller's velocity
forecast, so receivers can extrapolate the sender between packets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import VehicleState
from .gp import GPHyperParams, GPModel, GPTrainingSet

TIME_TRIGGERED = "ttc"
CONTROL_AWARE = "etc"

WINDOW_SIZE = 5
FORECAST_SIZE = 10

_TIME_TOL = 1e-9


@dataclass(frozen=True)
class TriggerPolicy:
    """When to transmit.

    ``threshold`` is compared against the controller's optimal cost in
    control-aware mode (zero degenerates to the time-triggered pattern);
    ``min_inter_event`` and ``max_inter_event`` bound the gap between
    consecutive transmissions of one vehicle.
    """

    mode: str = CONTROL_AWARE
    threshold: float = 700.0
    min_inter_event: float = 0.1
    max_inter_event: float = 0.6

    def __post_init__(self) -> None:
        if self.mode not in (TIME_TRIGGERED, CONTROL_AWARE):
            raise ValueError(f"unknown trigger mode: {self.mode!r}")
        if not 0.0 < self.min_inter_event <= self.max_inter_event:
            raise ValueError("need 0 < min_inter_event <= max_inter_event")
        if self.mode == CONTROL_AWARE and self.threshold < 0.0:
            raise ValueError("control-aware threshold must be non-negative")


@dataclass
class TriggerState:
    """Per-vehicle event bookkeeping."""

    last_event_time: float = -math.inf
    events_count: int = 0

    def record(self, now: float) -> None:
        self.last_event_time = now
        self.events_count += 1


def evaluate_trigger(policy: TriggerPolicy, state: TriggerState, now: float,
                     current_cost: float) -> bool:
    """Decide fire (True) or hold at a communication-slot boundary.

    Control-aware mode fires when the minimum inter-event time has elapsed
    and either the cost reaches the threshold or the maximum inter-event
    time is up.  Time-triggered mode fires at every slot.
    """
    if now < state.last_event_time - _TIME_TOL:
        raise ValueError("clock regression: now precedes the last event")
    if policy.mode == TIME_TRIGGERED:
        return True
    elapsed = now - state.last_event_time
    if elapsed < policy.min_inter_event - _TIME_TOL:
        return False
    return (current_cost >= policy.threshold
            or elapsed >= policy.max_inter_event - _TIME_TOL)


@dataclass(frozen=True)
class MBCMessage:
    """The over-the-air packet of model-based communication.

    Exactly five (timestamp, velocity) window samples no later than
    ``send_time`` and exactly ten forecast samples strictly after it, all
    strictly ascending in time.
    """

    sender_index: int
    send_time: float
    gp_hyper: GPHyperParams
    window_timestamps: np.ndarray
    window_velocities: np.ndarray
    position: float
    acceleration: float
    forecast_timestamps: np.ndarray
    forecast_velocities: np.ndarray

    def __post_init__(self) -> None:
        wt = np.asarray(self.window_timestamps, dtype=float)
        wv = np.asarray(self.window_velocities, dtype=float)
        ft = np.asarray(self.forecast_timestamps, dtype=float)
        fv = np.asarray(self.forecast_velocities, dtype=float)
        if wt.size != WINDOW_SIZE or wv.size != WINDOW_SIZE:
            raise ValueError(f"window must hold exactly {WINDOW_SIZE} samples")
        if ft.size != FORECAST_SIZE or fv.size != FORECAST_SIZE:
            raise ValueError(
                f"forecast must hold exactly {FORECAST_SIZE} samples")
        if not np.all(np.diff(wt) > 0.0):
            raise ValueError("window timestamps must be strictly ascending")
        if not np.all(np.diff(ft) > 0.0):
            raise ValueError("forecast timestamps must be strictly ascending")
        if wt[-1] > self.send_time + _TIME_TOL:
            raise ValueError("window samples must not postdate send_time")
        if ft[0] <= self.send_time + _TIME_TOL:
            raise ValueError("forecast samples must postdate send_time")
        for arr in (wt, wv, ft, fv):
            arr.setflags(write=False)
        object.__setattr__(self, "window_timestamps", wt)
        object.__setattr__(self, "window_velocities", wv)
        object.__setattr__(self, "forecast_timestamps", ft)
        object.__setattr__(self, "forecast_velocities", fv)

    def gp_model(self) -> GPModel:
        """Rebuild the sender's velocity model from the transmitted pieces."""
        return GPModel(self.gp_hyper,
                       GPTrainingSet(self.window_timestamps,
                                     self.window_velocities))

    def to_json(self) -> str:
        return json.dumps({
            "sender_index": self.sender_index,
            "send_time": self.send_time,
            "gp_hyper": {"length_scale": self.gp_hyper.length_scale,
                         "noise_std": self.gp_hyper.noise_std},
            "velocity_window": [[t, v] for t, v in
                                zip(self.window_timestamps,
                                    self.window_velocities)],
            "position": self.position,
            "acceleration": self.acceleration,
            "predicted_velocities": [[t, v] for t, v in
                                     zip(self.forecast_timestamps,
                                         self.forecast_velocities)],
        })

    @classmethod
    def from_json(cls, text: str) -> "MBCMessage":
        raw = json.loads(text)
        window = np.asarray(raw["velocity_window"], dtype=float)
        forecast = np.asarray(raw["predicted_velocities"], dtype=float)
        return cls(
            sender_index=int(raw["sender_index"]),
            send_time=float(raw["send_time"]),
            gp_hyper=GPHyperParams(float(raw["gp_hyper"]["length_scale"]),
                                   float(raw["gp_hyper"]["noise_std"])),
            window_timestamps=window[:, 0],
            window_velocities=window[:, 1],
            position=float(raw["position"]),
            acceleration=float(raw["acceleration"]),
            forecast_timestamps=forecast[:, 0],
            forecast_velocities=forecast[:, 1],
        )


def build_message(sender_index: int, state: VehicleState, model: GPModel,
                  plan, now: float) -> MBCMessage:
    """Package the transmission payload for one firing vehicle.

    ``plan`` must be the solve of the current step (its first predicted
    state stamped ``now``); anything older is rejected.
    """
    if abs(state.timestamp - now) > _TIME_TOL:
        raise ValueError("state snapshot is stale")
    if abs(plan.predicted_states[0].timestamp - now) > _TIME_TOL:
        raise ValueError("plan is stale: solved for an earlier step")
    if len(model.training) != WINDOW_SIZE:
        raise ValueError(
            f"velocity window must hold exactly {WINDOW_SIZE} samples")
    forecast_states = plan.predicted_states[1:]
    if len(forecast_states) != FORECAST_SIZE:
        raise ValueError(
            f"plan must forecast exactly {FORECAST_SIZE} velocities")
    return MBCMessage(
        sender_index=sender_index,
        send_time=now,
        gp_hyper=model.hyper,
        window_timestamps=model.training.timestamps,
        window_velocities=model.training.velocities,
        position=state.position,
        acceleration=state.acceleration,
        forecast_timestamps=np.array([s.timestamp for s in forecast_states]),
        forecast_velocities=np.array([s.velocity for s in forecast_states]),
    )


@dataclass
class ChannelModel:
    """Packet-erasure broadcast channel: each receiver independently loses a
    packet with probability ``packet_error_rate``; the seeded stream makes
    loss patterns reproducible."""

    packet_error_rate: float = 0.0
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.packet_error_rate <= 1.0:
            raise ValueError("packet_error_rate must lie in [0, 1]")
        self._rng = np.random.default_rng(self.rng_seed)


def broadcast(channel: ChannelModel, message: MBCMessage,
              receivers) -> list[int]:
    """Deliver the message over independent per-link erasures.

    Draws consume the channel stream in ascending receiver-index order so a
    fixed seed replays the identical loss pattern.  Returns the receiver
    indices that got the packet.
    """
    ordered = sorted(int(r) for r in receivers)
    if message.sender_index in ordered:
        raise ValueError("sender cannot receive its own broadcast")
    per = channel.packet_error_rate
    delivered = []
    for r in ordered:
        if channel._rng.random() >= per:
            delivered.append(r)
    return delivered
