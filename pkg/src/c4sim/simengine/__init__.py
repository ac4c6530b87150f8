"""Scenario description and the discrete-event engine."""

from .engine import (
    EventRow, FlowRow, IterRow, PortSample, RunReport, Simulation, reroute_flow, run, substream,
)
from .scenario import (
    FAULT_KINDS, Fault, JobSpec, Policies, RunSpec, Scenario, TopologySpec, rail_ring,
)

__all__ = [
    "EventRow", "FAULT_KINDS", "Fault", "FlowRow", "IterRow", "JobSpec", "Policies",
    "PortSample", "RunReport", "RunSpec", "Scenario", "Simulation", "TopologySpec", "rail_ring",
    "reroute_flow", "run", "substream",
]
