"""Early-completion detection for simulated embedded peripherals."""

from .detectors import (
    BracketEvent,
    ContractViolation,
    CurrentHeuristicState,
    DriftPolicy,
    EnergyHeuristicState,
    Progress,
    TimingHeuristicState,
)
from .devices import DeviceModel, OperationSpec, builtin_models, get_model, simulate_operation
from .harness import BenchmarkReport, DetectorConfig, ExperimentConfig, compare_reports, run_experiment
from .power import IODVSPolicy, OverheadModel
from .trace import CurrentTrace, Sample, State

__version__ = "0.1.0"

__all__ = [
    "BenchmarkReport",
    "BracketEvent",
    "ContractViolation",
    "CurrentHeuristicState",
    "CurrentTrace",
    "DetectorConfig",
    "DeviceModel",
    "DriftPolicy",
    "EnergyHeuristicState",
    "ExperimentConfig",
    "IODVSPolicy",
    "OperationSpec",
    "OverheadModel",
    "Progress",
    "Sample",
    "State",
    "TimingHeuristicState",
    "builtin_models",
    "compare_reports",
    "get_model",
    "run_experiment",
    "simulate_operation",
]
