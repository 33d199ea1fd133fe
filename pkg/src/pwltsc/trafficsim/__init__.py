"""Queue-based multi-intersection traffic simulator."""

from .demand import RouteTable, Schedule, generate_demand
from .metrics import metrics
from .network import (
    N_STAGES,
    PRESETS,
    Edge,
    Node,
    TrafficGraph,
    corridor_document,
    default_phase_program,
    grid_document,
    load_network,
)
from .simulator import GREEN, YELLOW, PhaseMachine, SimParams, SimState, Simulator, Trace, phase_violations

__all__ = [
    "N_STAGES", "PRESETS", "Edge", "Node", "TrafficGraph", "corridor_document", "default_phase_program",
    "grid_document", "load_network", "RouteTable", "Schedule", "generate_demand", "metrics", "GREEN",
    "YELLOW", "PhaseMachine", "SimParams", "SimState", "Simulator", "Trace", "phase_violations",
]
