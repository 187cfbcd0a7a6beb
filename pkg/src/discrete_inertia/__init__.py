"""Hybrid DAE simulation of power systems with discrete-device synthetic inertia."""
from .dynamics import DDParams, MachineParams, MachineState, VirtualSwingState
from .errors import (InitializationError, InsufficientDataError, ModelError, ParameterError, ScenarioError,
                     SimulationError, StepFailure)
from .integrator import Event, StepControl, SystemState, TimeSeries, simulate
from .model import FleetEntry, GridFormingUnit, Load, Machine, SystemModel
from .scenario import RunSummary, Scenario, load_scenario, summarize, wscc9_builtin

__version__ = "0.1.0"
