"""Closed-loop hydraulic simulation of multi-layer district heating networks."""

from __future__ import annotations

from .engine import Assembly, NumericAbort
from .io import bundled, load_network, load_state
from .passivity import InfeasibleSetpoints, eip_certificate, lyapunov_audit, solve_equilibrium
from .scenario import Scenario, ScenarioError, load_scenario
from .simulate import TrajectoryRecord, run
from .topology import NetworkGraph, TopologyError, validate_network

__all__ = [
    "Assembly", "InfeasibleSetpoints", "NetworkGraph", "NumericAbort", "Scenario", "ScenarioError",
    "TopologyError", "TrajectoryRecord", "bundled", "eip_certificate", "load_network", "load_scenario",
    "load_state", "lyapunov_audit", "run", "solve_equilibrium", "validate_network",
]
