"""Scenario configuration files: a flat JSON object mapping one-to-one onto
the scenario parameters, with documented defaults for everything."""

from __future__ import annotations

import json

import numpy as np

from .comms import TriggerPolicy
from .dynamics import VehicleParams
from .mpc import MPCWeights
from .sim import ScenarioConfig


class ConfigError(Exception):
    """Malformed configuration; the message names the offending field."""


_TOP_LEVEL_KEYS = {
    "vehicle_count", "duration", "step", "per", "seed", "horizon", "warmup",
    "mode", "threshold", "min_inter_event", "max_inter_event",
    "state_weight", "state_reference", "position_coupling",
    "velocity_coupling", "vehicle", "leader_profile",
}
_VEHICLE_KEYS = {
    "vehicle_length", "standstill_distance", "time_gap",
    "driveline_constant", "accel_min", "accel_max", "input_min",
    "input_max", "speed_max",
}


def load_config(path=None, overrides: dict | None = None) -> ScenarioConfig:
    """Build a ScenarioConfig from an optional JSON file plus overrides.

    Unknown keys and invalid values raise ConfigError naming the field.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ScenarioConfig:
    unknown = set(raw) - _TOP_LEVEL_KEYS
    if unknown:
        raise ConfigError(f"unknown config field: {sorted(unknown)[0]}")
    vehicle_raw = raw.get("vehicle", {})
    if not isinstance(vehicle_raw, dict):
        raise ConfigError("vehicle: must be an object")
    unknown = set(vehicle_raw) - _VEHICLE_KEYS
    if unknown:
        raise ConfigError(f"unknown config field: vehicle.{sorted(unknown)[0]}")

    def _field(builder, kwargs, name):
        try:
            return builder(**kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{name}: {exc}")

    params = _field(VehicleParams,
                    {k: float(v) for k, v in vehicle_raw.items()}, "vehicle")

    policy_kwargs = {}
    if "mode" in raw:
        policy_kwargs["mode"] = raw["mode"]
    for key in ("threshold", "min_inter_event", "max_inter_event"):
        if key in raw:
            try:
                policy_kwargs[key] = float(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: must be a number")
    policy = _field(TriggerPolicy, policy_kwargs, "trigger policy")

    weights_kwargs = {}
    if "state_weight" in raw:
        q = np.asarray(raw["state_weight"], dtype=float)
        if q.shape == (3,):
            q = np.diag(q)
        weights_kwargs["state_weight"] = q
    if "state_reference" in raw:
        weights_kwargs["state_reference"] = np.asarray(raw["state_reference"],
                                                       dtype=float)
    for key in ("position_coupling", "velocity_coupling"):
        if key in raw:
            weights_kwargs[key] = float(raw[key])
    weights = _field(MPCWeights, weights_kwargs, "weights")

    scenario_kwargs = {"params": params, "policy": policy, "weights": weights}
    for key, caster in (("vehicle_count", int), ("duration", float),
                        ("step", float), ("per", float), ("seed", int),
                        ("horizon", int), ("warmup", float)):
        if key in raw:
            try:
                scenario_kwargs[key] = caster(raw[key])
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: must be a {caster.__name__}")
    if "leader_profile" in raw:
        knots = raw["leader_profile"]
        try:
            scenario_kwargs["leader_profile"] = tuple(
                (float(t), float(v)) for t, v in knots)
        except (TypeError, ValueError):
            raise ConfigError("leader_profile: must be [time, speed] pairs")
    try:
        return ScenarioConfig(**scenario_kwargs)
    except ValueError as exc:
        msg = str(exc)
        for key in ("duration", "vehicle_count", "per", "horizon", "warmup",
                    "step", "leader_profile"):
            if key in msg:
                raise ConfigError(f"{key}: {msg}")
        raise ConfigError(msg)


def default_config_json() -> str:
    """The fully resolved default configuration, as a config file."""
    from .sim import config_to_dict
    return json.dumps(config_to_dict(ScenarioConfig()), indent=2,
                      sort_keys=True)
