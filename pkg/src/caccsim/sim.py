"""Scenario orchestration: the fixed-step loop wiring dynamics, controllers,
triggers, the lossy channel and the belief stores together, plus metrics,
trace logging, and seeded Monte-Carlo batches.

Each step: every vehicle solves its horizon problem on information from the
previous step, evaluates its trigger on the optimal cost, firing vehicles
fit and broadcast their velocity model, deliveries refresh the receivers'
stores, and all vehicles apply their first planned input simultaneously.
A scenario is fully determined by its configuration (including the channel
seed): two runs produce bit-identical traces.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import comms, dynamics, estimator, gp, mpc
from .comms import ChannelModel, TriggerPolicy, TriggerState
from .dynamics import VehicleParams, VehicleState
from .estimator import BeliefStore
from .mpc import MPCWeights

TRACE_SCHEMA = "cacc-trace/1"
METRICS_SCHEMA = "cacc-metrics/1"

DEFAULT_LEADER_PROFILE = (
    (0.0, 15.0), (5.0, 15.0), (15.0, 25.0),
    (35.0, 25.0), (45.0, 18.0), (60.0, 18.0),
)

_TIME_TOL = 1e-9


def leader_velocity(profile, t):
    """Piecewise-linear reference speed; clamped beyond the knot range."""
    knots = np.asarray(profile, dtype=float)
    return np.interp(t, knots[:, 0], knots[:, 1])


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything that determines one scenario run."""

    vehicle_count: int = 10
    duration: float = 60.0
    step: float = 0.1
    per: float = 0.0
    policy: TriggerPolicy = field(default_factory=TriggerPolicy)
    weights: MPCWeights = field(default_factory=MPCWeights)
    params: VehicleParams = field(default_factory=VehicleParams)
    leader_profile: tuple = DEFAULT_LEADER_PROFILE
    seed: int = 0
    horizon: int = 10
    warmup: float = 0.5

    def __post_init__(self) -> None:
        if self.vehicle_count < 2:
            raise ValueError("vehicle_count must be at least 2")
        if self.step <= 0.0:
            raise ValueError("step must be positive")
        steps = self.duration / self.step
        if abs(steps - round(steps)) > 1e-9 or steps < 1:
            raise ValueError("duration must be a positive multiple of step")
        if not 0.0 <= self.per <= 1.0:
            raise ValueError("per must lie in [0, 1]")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.warmup < 0.0:
            raise ValueError("warmup must be non-negative")
        knots = np.asarray(self.leader_profile, dtype=float)
        if knots.ndim != 2 or knots.shape[1] != 2 or knots.shape[0] < 1:
            raise ValueError("leader_profile must be (time, speed) knots")
        if knots.shape[0] > 1 and not np.all(np.diff(knots[:, 0]) > 0):
            raise ValueError("leader_profile knot times must be increasing")
        if np.any(knots[:, 1] < 0) or np.any(knots[:, 1]
                                             > self.params.speed_max):
            raise ValueError("leader_profile speeds must lie in "
                             "[0, speed_max]")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.step))


@dataclass
class Metrics:
    """Aggregate statistics of one scenario run."""

    mean_spacing_error: float
    mean_speed_difference: float
    mean_acceleration_difference: float
    mean_comm_rate: float
    collision: bool
    per_vehicle_event_times: list
    max_accel_violation: float
    max_input_violation: float
    max_rate_violation: float
    max_kkt_residual: float
    min_inter_event_steps: int | None
    max_inter_event_steps: int | None

    SCALAR_FIELDS = ("mean_spacing_error", "mean_speed_difference",
                     "mean_acceleration_difference", "mean_comm_rate")

    def to_dict(self) -> dict:
        return {
            "mean_spacing_error": self.mean_spacing_error,
            "mean_speed_difference": self.mean_speed_difference,
            "mean_acceleration_difference": self.mean_acceleration_difference,
            "mean_comm_rate": self.mean_comm_rate,
            "collision": self.collision,
            "per_vehicle_event_times": [list(map(float, ev))
                                        for ev in self.per_vehicle_event_times],
            "max_accel_violation": self.max_accel_violation,
            "max_input_violation": self.max_input_violation,
            "max_rate_violation": self.max_rate_violation,
            "max_kkt_residual": self.max_kkt_residual,
            "min_inter_event_steps": self.min_inter_event_steps,
            "max_inter_event_steps": self.max_inter_event_steps,
        }


@dataclass
class TraceLog:
    """Complete per-step, per-vehicle record of one run.

    Rows cover the states the controllers acted on (steps 0 .. steps-1);
    the post-update terminal state is not logged.  Metrics recomputed from a
    trace equal the run's reported metrics exactly.
    """

    n_vehicles: int
    dt: float
    duration: float
    position: np.ndarray
    velocity: np.ndarray
    acceleration: np.ndarray
    control_input: np.ndarray
    gap: np.ndarray
    desired_gap: np.ndarray
    trigger_cost: np.ndarray
    event: np.ndarray
    delivered_to: list
    kkt_residual: np.ndarray
    solve_status: list
    est_pred_position: np.ndarray
    est_pred_velocity: np.ndarray
    config_json: str = ""

    HEADER = ["step", "time", "vehicle", "position", "velocity",
              "acceleration", "input", "gap", "desired_gap", "trigger_cost",
              "event", "delivered_to", "kkt_residual", "solve_status",
              "est_pred_position", "est_pred_velocity"]

    @property
    def steps(self) -> int:
        return self.position.shape[0]

    def times(self) -> np.ndarray:
        return np.arange(self.steps) * self.dt

    def to_csv(self, stream) -> None:
        stream.write(f"# {TRACE_SCHEMA}\n")
        stream.write(f"# config: {self.config_json}\n")
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(self.HEADER)
        for k in range(self.steps):
            t = k * self.dt
            for n in range(self.n_vehicles):
                writer.writerow([
                    k, repr(float(t)), n,
                    repr(float(self.position[k, n])),
                    repr(float(self.velocity[k, n])),
                    repr(float(self.acceleration[k, n])),
                    repr(float(self.control_input[k, n])),
                    repr(float(self.gap[k, n])),
                    repr(float(self.desired_gap[k, n])),
                    repr(float(self.trigger_cost[k, n])),
                    int(self.event[k, n]),
                    ";".join(str(r) for r in self.delivered_to[k][n]),
                    repr(float(self.kkt_residual[k, n])),
                    self.solve_status[k][n],
                    repr(float(self.est_pred_position[k, n])),
                    repr(float(self.est_pred_velocity[k, n])),
                ])

    @classmethod
    def from_csv(cls, stream) -> "TraceLog":
        schema_line = stream.readline().strip()
        if schema_line != f"# {TRACE_SCHEMA}":
            raise ValueError(f"unsupported trace schema: {schema_line!r}")
        config_line = stream.readline().strip()
        if not config_line.startswith("# config: "):
            raise ValueError("missing config header line")
        config_json = config_line[len("# config: "):]
        reader = csv.reader(stream)
        header = next(reader)
        if header != cls.HEADER:
            raise ValueError("unexpected trace header")
        rows = list(reader)
        if not rows:
            raise ValueError("empty trace")
        n_vehicles = max(int(r[2]) for r in rows) + 1
        steps = max(int(r[0]) for r in rows) + 1
        if len(rows) != n_vehicles * steps:
            raise ValueError("incomplete trace: expected one row per "
                             "step and vehicle")
        cfg = json.loads(config_json)
        dt = float(cfg["step"])
        duration = float(cfg["duration"])
        shape = (steps, n_vehicles)
        out = cls(n_vehicles=n_vehicles, dt=dt, duration=duration,
                  position=np.zeros(shape), velocity=np.zeros(shape),
                  acceleration=np.zeros(shape), control_input=np.zeros(shape),
                  gap=np.zeros(shape), desired_gap=np.zeros(shape),
                  trigger_cost=np.zeros(shape),
                  event=np.zeros(shape, dtype=bool),
                  delivered_to=[[[] for _ in range(n_vehicles)]
                                for _ in range(steps)],
                  kkt_residual=np.zeros(shape),
                  solve_status=[[""] * n_vehicles for _ in range(steps)],
                  est_pred_position=np.zeros(shape),
                  est_pred_velocity=np.zeros(shape),
                  config_json=config_json)
        for r in rows:
            k, n = int(r[0]), int(r[2])
            out.position[k, n] = float(r[3])
            out.velocity[k, n] = float(r[4])
            out.acceleration[k, n] = float(r[5])
            out.control_input[k, n] = float(r[6])
            out.gap[k, n] = float(r[7])
            out.desired_gap[k, n] = float(r[8])
            out.trigger_cost[k, n] = float(r[9])
            out.event[k, n] = bool(int(r[10]))
            out.delivered_to[k][n] = ([int(x) for x in r[11].split(";")]
                                      if r[11] else [])
            out.kkt_residual[k, n] = float(r[12])
            out.solve_status[k][n] = r[13]
            out.est_pred_position[k, n] = float(r[14])
            out.est_pred_velocity[k, n] = float(r[15])
        return out


def compute_metrics(trace: TraceLog) -> Metrics:
    """Aggregate a trace into scenario metrics.

    Spacing error averages the absolute gap deviation over followers and
    steps; speed and acceleration differences average the per-step spread
    (max minus min) over all platoon members; the communication rate divides
    total transmissions by vehicle count times duration.
    """
    if trace.position.size == 0:
        raise ValueError("empty trace")
    follower_gap = trace.gap[:, 1:]
    follower_desired = trace.desired_gap[:, 1:]
    spacing = float(np.mean(np.abs(follower_gap - follower_desired)))
    speed_diff = float(np.mean(trace.velocity.max(axis=1)
                               - trace.velocity.min(axis=1)))
    accel_diff = float(np.mean(trace.acceleration.max(axis=1)
                               - trace.acceleration.min(axis=1)))
    total_events = int(trace.event.sum())
    comm_rate = total_events / (trace.n_vehicles * trace.duration)
    collision = bool(np.any(follower_gap <= 0.0))
    times = trace.times()
    event_times = [times[trace.event[:, n]].tolist()
                   for n in range(trace.n_vehicles)]

    cfg = json.loads(trace.config_json) if trace.config_json else {}
    vp = cfg.get("vehicle", {})
    a_max = float(vp.get("accel_max", 3.0))
    a_min = float(vp.get("accel_min", -4.0))
    u_max = float(vp.get("input_max", 3.0))
    u_min = float(vp.get("input_min", -4.0))
    accel_viol = float(np.max(np.maximum(trace.acceleration - a_max,
                                         a_min - trace.acceleration),
                              initial=0.0))
    input_viol = float(np.max(np.maximum(trace.control_input - u_max,
                                         u_min - trace.control_input),
                              initial=0.0))
    seq = np.vstack([np.zeros((1, trace.n_vehicles)), trace.control_input])
    rates = np.diff(seq, axis=0)
    rate_viol = float(np.max(np.maximum(rates - trace.dt * u_max,
                                        trace.dt * u_min - rates),
                             initial=0.0))
    kkt = float(np.max(trace.kkt_residual, initial=0.0))

    gaps_steps = []
    for n in range(trace.n_vehicles):
        ks = np.nonzero(trace.event[:, n])[0]
        if ks.size >= 2:
            gaps_steps.extend(np.diff(ks).tolist())
    min_gap = int(min(gaps_steps)) if gaps_steps else None
    max_gap = int(max(gaps_steps)) if gaps_steps else None

    return Metrics(
        mean_spacing_error=spacing,
        mean_speed_difference=speed_diff,
        mean_acceleration_difference=accel_diff,
        mean_comm_rate=comm_rate,
        collision=collision,
        per_vehicle_event_times=event_times,
        max_accel_violation=accel_viol,
        max_input_violation=input_viol,
        max_rate_violation=rate_viol,
        max_kkt_residual=kkt,
        min_inter_event_steps=min_gap,
        max_inter_event_steps=max_gap,
    )


def config_to_dict(config: ScenarioConfig) -> dict:
    """Fully resolved configuration for reproducibility headers."""
    return {
        "vehicle_count": config.vehicle_count,
        "duration": config.duration,
        "step": config.step,
        "per": config.per,
        "seed": config.seed,
        "horizon": config.horizon,
        "warmup": config.warmup,
        "mode": config.policy.mode,
        "threshold": config.policy.threshold,
        "min_inter_event": config.policy.min_inter_event,
        "max_inter_event": config.policy.max_inter_event,
        "state_weight": [list(map(float, row))
                         for row in config.weights.state_weight],
        "state_reference": list(map(float, config.weights.state_reference)),
        "position_coupling": config.weights.position_coupling,
        "velocity_coupling": config.weights.velocity_coupling,
        "vehicle": {
            "vehicle_length": config.params.vehicle_length,
            "standstill_distance": config.params.standstill_distance,
            "time_gap": config.params.time_gap,
            "driveline_constant": config.params.driveline_constant,
            "accel_min": config.params.accel_min,
            "accel_max": config.params.accel_max,
            "input_min": config.params.input_min,
            "input_max": config.params.input_max,
            "speed_max": config.params.speed_max,
        },
        "leader_profile": [list(map(float, knot))
                           for knot in config.leader_profile],
    }


class _VehicleRuntime:
    __slots__ = ("state", "previous_input", "trigger", "history_t",
                 "history_v", "store")

    def __init__(self, state: VehicleState, dt: float):
        self.state = state
        self.previous_input = 0.0
        self.trigger = TriggerState()
        # Window seeded with pre-run samples at the equilibrium speed so the
        # five-sample protocol holds from the first transmission.
        self.history_t = [(k - comms.WINDOW_SIZE + 1) * dt
                          for k in range(comms.WINDOW_SIZE)]
        self.history_v = [state.velocity] * comms.WINDOW_SIZE
        self.store = BeliefStore()

    def record_sample(self, t: float, v: float) -> None:
        self.history_t.append(t)
        self.history_v.append(v)
        del self.history_t[0]
        del self.history_v[0]

    def window(self) -> gp.GPTrainingSet:
        return gp.GPTrainingSet(np.array(self.history_t),
                                np.array(self.history_v))


def initial_states(config: ScenarioConfig) -> list[VehicleState]:
    """All vehicles at the spacing-policy equilibrium behind x = 0 at the
    leader's initial speed, zero acceleration."""
    v0 = float(leader_velocity(config.leader_profile, 0.0))
    pitch = (config.params.vehicle_length
             + dynamics.desired_spacing(config.params, v0))
    return [VehicleState(position=-n * pitch, velocity=v0, acceleration=0.0,
                         timestamp=0.0)
            for n in range(config.vehicle_count)]


def run_scenario(config: ScenarioConfig) -> tuple[Metrics, TraceLog]:
    """Execute one scenario; deterministic for a fixed configuration."""
    n_v = config.vehicle_count
    dt = config.step
    steps = config.steps
    horizon = config.horizon
    params = config.params
    weights = config.weights
    policy = config.policy
    channel = ChannelModel(config.per, config.seed)
    vehicles = [_VehicleRuntime(s, dt) for s in initial_states(config)]

    shape = (steps, n_v)
    trace = TraceLog(
        n_vehicles=n_v, dt=dt, duration=config.duration,
        position=np.zeros(shape), velocity=np.zeros(shape),
        acceleration=np.zeros(shape), control_input=np.zeros(shape),
        gap=np.full(shape, np.nan), desired_gap=np.full(shape, np.nan),
        trigger_cost=np.zeros(shape), event=np.zeros(shape, dtype=bool),
        delivered_to=[[[] for _ in range(n_v)] for _ in range(steps)],
        kkt_residual=np.zeros(shape),
        solve_status=[[""] * n_v for _ in range(steps)],
        est_pred_position=np.full(shape, np.nan),
        est_pred_velocity=np.full(shape, np.nan),
        config_json=json.dumps(config_to_dict(config), sort_keys=True),
    )

    for k in range(steps):
        t = k * dt
        horizon_times = t + np.arange(horizon) * dt
        plans = []
        sensed = []
        forecast_cache: dict = {}

        # 1) All vehicles solve on last step's information.
        for n in range(n_v):
            veh = vehicles[n]
            if n == 0:
                ref = leader_velocity(config.leader_profile,
                                      t + np.arange(horizon + 1) * dt)
                plan = mpc.plan_leader(params, weights, veh.state,
                                       veh.previous_input, ref, horizon,
                                       dt=dt)
                sensed.append((math.nan, math.nan))
            else:
                gap_meas, dv_meas = estimator.sense_immediate_predecessor(
                    params, veh.state, vehicles[n - 1].state)
                sensed.append((gap_meas, dv_meas))
                forecasts = []
                for i in range(n - 1, -1, -1):
                    record = veh.store.get(i)
                    if record is not None:
                        key = (i, record.last_message.send_time)
                        fc = forecast_cache.get(key)
                        if fc is None:
                            fc = estimator.forecast_neighbor(record,
                                                             horizon_times)
                            forecast_cache[key] = fc
                        forecasts.append(fc)
                    elif i == n - 1:
                        forecasts.append(estimator.sensed_fallback_forecast(
                            params, veh.state, gap_meas, dv_meas, i,
                            horizon_times))
                    else:
                        break  # cold start: drop coupling beyond the hole
                plan = mpc.plan(params, weights, veh.state,
                                veh.previous_input, forecasts, horizon,
                                dt=dt, sensed_gap=gap_meas,
                                sensed_velocity_error=dv_meas)
                trace.est_pred_position[k, n] = forecasts[0].positions[0]
                trace.est_pred_velocity[k, n] = forecasts[0].velocities[0]
            plans.append(plan)

        # 2) Triggers; 3) firing vehicles broadcast; deliveries ingested.
        for n in range(n_v):
            veh = vehicles[n]
            if t < config.warmup - _TIME_TOL:
                fire = True
            else:
                fire = comms.evaluate_trigger(policy, veh.trigger, t,
                                              plans[n].objective_value)
            if fire:
                window = veh.window()
                model = gp.GPModel(gp.fit(window), window)
                message = comms.build_message(n, veh.state, model, plans[n],
                                              t)
                delivered = comms.broadcast(channel, message,
                                            range(n + 1, n_v))
                veh.trigger.record(t)
                for r in delivered:
                    vehicles[r].store.ingest(message, t)
                trace.event[k, n] = True
                trace.delivered_to[k][n] = delivered

        # 4) Log the acted-on states, then step everyone simultaneously.
        for n in range(n_v):
            veh = vehicles[n]
            u = float(plans[n].inputs[0])
            trace.position[k, n] = veh.state.position
            trace.velocity[k, n] = veh.state.velocity
            trace.acceleration[k, n] = veh.state.acceleration
            trace.control_input[k, n] = u
            if n > 0:
                trace.gap[k, n] = sensed[n][0]
                trace.desired_gap[k, n] = dynamics.desired_spacing(
                    params, veh.state.velocity)
            trace.trigger_cost[k, n] = plans[n].objective_value
            trace.kkt_residual[k, n] = plans[n].kkt_residual
            trace.solve_status[k][n] = plans[n].solve_status

        new_time = (k + 1) * dt
        for n in range(n_v):
            veh = vehicles[n]
            stepped = dynamics.step(params, veh.state,
                                    float(plans[n].inputs[0]), 0.0, dt)
            # Re-stamp with the canonical slot time to avoid accumulation.
            veh.state = replace(stepped, timestamp=new_time)
            veh.previous_input = float(plans[n].inputs[0])
            veh.record_sample(new_time, veh.state.velocity)

    return compute_metrics(trace), trace


@dataclass
class BatchResult:
    """Per-run metrics of a seeded batch plus summary statistics."""

    runs: list[Metrics]

    def values(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.runs], dtype=float)

    def mean(self, name: str) -> float:
        return float(np.mean(self.values(name)))

    def stderr(self, name: str) -> float:
        vals = self.values(name)
        if vals.size < 2:
            return 0.0
        return float(np.std(vals, ddof=1) / math.sqrt(vals.size))

    def any_collision(self) -> bool:
        return any(m.collision for m in self.runs)

    def summary(self) -> dict:
        out = {}
        for name in Metrics.SCALAR_FIELDS:
            out[name] = {"mean": self.mean(name), "stderr": self.stderr(name)}
        out["collisions"] = sum(int(m.collision) for m in self.runs)
        out["runs"] = len(self.runs)
        out["max_kkt_residual"] = max(m.max_kkt_residual for m in self.runs)
        return out


def _run_for_seed(args) -> Metrics:
    config, seed = args
    metrics, _ = run_scenario(replace(config, seed=seed))
    return metrics


def run_batch(config: ScenarioConfig, runs: int,
              workers: int = 1) -> BatchResult:
    """Monte-Carlo batch with seeds derived as base seed + run index."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    seeds = [config.seed + i for i in range(runs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_for_seed,
                                    [(config, s) for s in seeds]))
    else:
        results = [_run_for_seed((config, s)) for s in seeds]
    return BatchResult(runs=results)
