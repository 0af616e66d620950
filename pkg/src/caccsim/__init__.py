"""CACC platoon simulation with control-aware event-triggered communication
and Gaussian-process model-based state sharing."""

from .comms import (CONTROL_AWARE, TIME_TRIGGERED, ChannelModel, MBCMessage,
                    TriggerPolicy, TriggerState)
from .dynamics import VehicleParams, VehicleState
from .gp import GPHyperParams, GPModel, GPPrediction, GPTrainingSet
from .mpc import HorizonPlan, MPCWeights, NeighborForecast
from .sim import (BatchResult, Metrics, ScenarioConfig, TraceLog,
                  compute_metrics, run_batch, run_scenario)

__version__ = "0.1.0"

__all__ = [
    "CONTROL_AWARE", "TIME_TRIGGERED", "ChannelModel", "MBCMessage",
    "TriggerPolicy", "TriggerState", "VehicleParams", "VehicleState",
    "GPHyperParams", "GPModel", "GPPrediction", "GPTrainingSet",
    "HorizonPlan", "MPCWeights", "NeighborForecast", "BatchResult",
    "Metrics", "ScenarioConfig", "TraceLog", "compute_metrics", "run_batch",
    "run_scenario", "__version__",
]
