"""Single-class road-network analysis: equilibrium assignment, latency-function
estimation, OD demand calibration, and price-of-anarchy reporting."""

from .latency import CongestionFactor, beckmann_term, marginal_cost, travel_time
from .network import (
    DemandVector,
    FlowState,
    Network,
    NetworkDataError,
    load_flows,
    load_network,
    save_flows,
)
from .paths import Route, RouteSet, all_or_nothing, enumerate_routes, k_shortest_simple, shortest_routes
from .equilibrium import (
    SolverFailure,
    SolverReport,
    solve_so,
    solve_ue_fw,
    solve_ue_msa,
    wardrop_check,
)

__version__ = "0.1.0"

__all__ = [
    "CongestionFactor", "beckmann_term", "marginal_cost", "travel_time",
    "DemandVector", "FlowState", "Network", "NetworkDataError",
    "load_flows", "load_network", "save_flows",
    "Route", "RouteSet", "all_or_nothing", "enumerate_routes",
    "k_shortest_simple", "shortest_routes",
    "SolverFailure", "SolverReport", "solve_so", "solve_ue_fw",
    "solve_ue_msa", "wardrop_check",
    "__version__",
]
